//! Command-line front end: dataset generation, experiment runs, delta
//! sweeps, region cross-checks, the robustness matrix, and self tests.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use conformal_pi::error::Error;
use conformal_pi::synth::{generate, write_params_json, CorruptionKind};
use conformal_pi_harness::config::{ExperimentConfig, RegionConfig, SweepConfig};
use conformal_pi_harness::experiment::{
    run_experiment, write_aggregate_csv, write_metrics_csv,
};
use conformal_pi_harness::sweep::{
    sweep_constant_delta, sweep_region, triply_matrix, write_delta_csv, write_matrix_csv,
    write_region_csv,
};
use conformal_pi_harness::{checks, plot};

#[derive(Parser)]
#[command(
    name = "cpi",
    about = "Conformal prediction under corrupted labels with privileged information"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV plus a generator-params sidecar).
    Gen {
        /// Corruption mechanism: under, over, or hard.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path; the sidecar lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured methods across repeats.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Sweep a constant additive weight error through privileged
    /// calibration.
    SweepDelta {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Validity-region cross-check on a fixed calibration draw.
    Region {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Oracle/degenerate robustness matrix.
    Triply {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the oracle-equivalence suites.
    Selftest,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io(_)
        | Error::CsvParse { .. }
        | Error::Json(_)
        | Error::GeneratorRequired
        | Error::DataInvariant(_)
        | Error::UnknownSample { .. } => EXIT_DATA,
        _ => EXIT_CONFIG,
    }
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, u8> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("cannot read config {}: {e}", path.display());
        EXIT_DATA
    })?;
    serde_json::from_str(&text).map_err(|e| {
        eprintln!("bad config {}: {e}", path.display());
        EXIT_CONFIG
    })
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("params.json")
}

fn run() -> Result<(), u8> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { kind, n, seed, out } => {
            let kind: CorruptionKind = kind.parse().map_err(|e| {
                eprintln!("{e}");
                EXIT_CONFIG
            })?;
            let (dataset, params) = generate(n, seed, kind).map_err(|e| {
                eprintln!("generation failed: {e}");
                exit_code_for(&e)
            })?;
            let write = || -> conformal_pi::Result<()> {
                conformal_pi::data::write_csv(&dataset, &out)?;
                write_params_json(&params, sidecar_path(&out))?;
                Ok(())
            };
            write().map_err(|e| {
                eprintln!("write failed: {e}");
                EXIT_DATA
            })?;
            println!(
                "wrote {} ({} rows) and {}",
                out.display(),
                dataset.len(),
                sidecar_path(&out).display()
            );
            Ok(())
        }
        Command::Run { config, out_dir } => {
            let cfg: ExperimentConfig = load_config(&config)?;
            let out = run_experiment(&cfg).map_err(|e| {
                eprintln!("run failed: {e}");
                exit_code_for(&e)
            })?;
            std::fs::create_dir_all(&out_dir).map_err(|_| EXIT_DATA)?;
            let io = || -> conformal_pi::Result<()> {
                write_metrics_csv(out_dir.join("metrics.csv"), &out.reports)?;
                write_aggregate_csv(out_dir.join("aggregate.csv"), &out.aggregates)?;
                std::fs::write(
                    out_dir.join("coverage.svg"),
                    plot::coverage_bars("Coverage by method", &out.aggregates, 1.0 - cfg.alpha),
                )?;
                Ok(())
            };
            io().map_err(|e| {
                eprintln!("write failed: {e}");
                EXIT_DATA
            })?;
            for a in &out.aggregates {
                println!(
                    "{}: coverage {:.4} +- {:.4}, length {:.4}",
                    a.method, a.coverage_mean, a.coverage_se, a.length_mean
                );
            }
            Ok(())
        }
        Command::SweepDelta { config, out_dir } => {
            let cfg: SweepConfig = load_config(&config)?;
            let out = sweep_constant_delta(&cfg).map_err(|e| {
                eprintln!("sweep failed: {e}");
                exit_code_for(&e)
            })?;
            std::fs::create_dir_all(&out_dir).map_err(|_| EXIT_DATA)?;
            let io = || -> conformal_pi::Result<()> {
                write_delta_csv(out_dir.join("delta_sweep.csv"), &out)?;
                std::fs::write(
                    out_dir.join("delta_sweep.svg"),
                    plot::delta_sweep_plot(
                        "Coverage under constant weight error",
                        &out,
                        1.0 - cfg.base.alpha,
                    ),
                )?;
                Ok(())
            };
            io().map_err(|e| {
                eprintln!("write failed: {e}");
                EXIT_DATA
            })?;
            for (d, a) in &out.aggregates_per_delta {
                println!("delta {d:+.3}: coverage {:.4}", a.coverage_mean);
            }
            println!("mean W/(n+1): {:.4}", out.mean_weight_scale);
            Ok(())
        }
        Command::Region { config, out_dir } => {
            let cfg: RegionConfig = load_config(&config)?;
            let out = sweep_region(&cfg).map_err(|e| {
                eprintln!("region sweep failed: {e}");
                exit_code_for(&e)
            })?;
            std::fs::create_dir_all(&out_dir).map_err(|_| EXIT_DATA)?;
            let io = || -> conformal_pi::Result<()> {
                write_region_csv(out_dir.join("region.csv"), &out)?;
                std::fs::write(
                    out_dir.join("region.svg"),
                    plot::region_heatmap("Validity region", &out),
                )?;
                Ok(())
            };
            io().map_err(|e| {
                eprintln!("write failed: {e}");
                EXIT_DATA
            })?;
            println!(
                "theory/empirics agreement on {} compared cells: {:.3}",
                out.compared_cells, out.agreement
            );
            Ok(())
        }
        Command::Triply { config, out_dir } => {
            let cfg: ExperimentConfig = load_config(&config)?;
            let rows = triply_matrix(&cfg).map_err(|e| {
                eprintln!("matrix run failed: {e}");
                exit_code_for(&e)
            })?;
            std::fs::create_dir_all(&out_dir).map_err(|_| EXIT_DATA)?;
            write_matrix_csv(out_dir.join("triply_matrix.csv"), &rows).map_err(|e| {
                eprintln!("write failed: {e}");
                EXIT_DATA
            })?;
            for r in &rows {
                println!(
                    "{}: coverage {:.4} +- {:.4}, length {:.4}, dominance {}",
                    r.cell.label(),
                    r.coverage_mean,
                    r.coverage_se,
                    r.length_mean,
                    r.dominance_held
                );
            }
            Ok(())
        }
        Command::Selftest => {
            let reports = checks::run_all();
            let mut ok = true;
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status} {} ({} instances, {} mismatches, {:.2?})",
                    r.name, r.instances, r.mismatches, r.elapsed
                );
                ok &= r.passed();
            }
            if ok {
                Ok(())
            } else {
                Err(1)
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
