//! Integration tests for the experiment pipeline and CLI surface.

use std::process::Command;

use conformal_pi::calibrate::cp_threshold;
use conformal_pi::data::{Dataset, Sample};
use conformal_pi::models::{fit_logistic, LogisticFitConfig};
use conformal_pi::synth::{generate, CorruptionKind};
use conformal_pi_harness::config::{
    DataSource, ExperimentConfig, Method, SamplerConfig, SweepConfig,
};
use conformal_pi_harness::experiment::{
    fit_repeat, run_experiment, run_repeat, write_metrics_csv, PreparedData,
};
use conformal_pi_harness::sweep::sweep_constant_delta;

fn config(kind: CorruptionKind, n: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        source: DataSource::Generator { kind, n, seed },
        methods: vec![Method::NaiveCp],
        alpha: 0.1,
        beta: 0.005,
        repeats: 5,
        master_seed: 7,
        learner: Default::default(),
        sampler: SamplerConfig::default(),
        triply_pcp_weights: Default::default(),
    }
}

fn strip_corruption(ds: &Dataset) -> Dataset {
    let samples: Vec<Sample> = ds
        .samples
        .iter()
        .map(|s| Sample {
            observed_label: s.clean_label,
            corrupted: false,
            ..s.clone()
        })
        .collect();
    Dataset::new(samples, ds.d_x, ds.d_z).unwrap()
}

#[test]
fn naive_cp_on_clean_data_hits_nominal_band() {
    let (raw, _) = generate(5_000, 3, CorruptionKind::Under).unwrap();
    let clean = strip_corruption(&raw);
    let prepared = PreparedData {
        dataset: clean,
        params: None,
    };
    let mut covs = Vec::new();
    let cfg = config(CorruptionKind::Under, 5_000, 3);
    for r in 0..30 {
        let fit = fit_repeat(&cfg, &prepared, r, false, false).unwrap();
        let out = run_repeat(&cfg, &fit).unwrap();
        covs.push(out.reports[0].coverage);
    }
    let mean = covs.iter().sum::<f64>() / covs.len() as f64;
    assert!(
        (0.88..=0.92).contains(&mean),
        "clean-data coverage {mean} outside the nominal band"
    );
}

#[test]
fn ui_without_corruption_reduces_to_plain_cp() {
    let (raw, _) = generate(3_000, 5, CorruptionKind::Under).unwrap();
    let prepared = PreparedData {
        dataset: strip_corruption(&raw),
        params: None,
    };
    let mut cfg = config(CorruptionKind::Under, 3_000, 5);
    cfg.methods = vec![Method::NaiveCp, Method::Ui];
    for r in 0..3 {
        let fit = fit_repeat(&cfg, &prepared, r, false, false).unwrap();
        let out = run_repeat(&cfg, &fit).unwrap();
        // no corrupted calibration samples: the imputation scheme never
        // draws, so its threshold is plain conformal on its cal half
        let cal_scores: Vec<f64> = fit
            .splits
            .cal
            .iter()
            .map(|&i| fit.score_at(i, fit.data.samples[i].observed_label.unwrap()))
            .collect();
        let expect = cp_threshold(&cal_scores, cfg.alpha).value;
        assert_eq!(out.thresholds["UI"], expect);
    }
}

#[test]
fn metrics_csv_is_byte_deterministic() {
    let mut cfg = config(CorruptionKind::Over, 2_000, 9);
    cfg.methods = vec![Method::NaiveCp, Method::NaiveImpute, Method::Ui];
    cfg.repeats = 3;
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for k in 0..2 {
        let out = run_experiment(&cfg).unwrap();
        let path = dir.path().join(format!("m{k}.csv"));
        write_metrics_csv(&path, &out.reports).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn triply_dominates_components_on_every_repeat() {
    let mut cfg = config(CorruptionKind::Under, 4_000, 21);
    cfg.methods = vec![Method::NaiveCp, Method::PcpTrue, Method::Ui, Method::Triply];
    cfg.repeats = 4;
    let out = run_experiment(&cfg).unwrap();
    for r in 0..cfg.repeats {
        let cov = |m: Method| {
            out.reports
                .iter()
                .find(|rep| rep.method == m.name() && rep.repeat_id == r)
                .unwrap()
                .coverage
        };
        let union = cov(Method::Triply);
        for m in [Method::NaiveCp, Method::PcpTrue, Method::Ui] {
            assert!(union >= cov(m), "repeat {r}: union {union} < {}", cov(m));
        }
    }
}

#[test]
fn zero_shift_sweep_equals_true_weight_baseline() {
    let mut cfg = config(CorruptionKind::Over, 4_000, 33);
    cfg.methods = vec![Method::PcpTrue];
    cfg.repeats = 4;
    let baseline = run_experiment(&cfg).unwrap();
    let sweep = sweep_constant_delta(&SweepConfig {
        base: cfg.clone(),
        deltas: vec![0.0],
    })
    .unwrap();
    for r in 0..cfg.repeats {
        let base_cov = baseline
            .reports
            .iter()
            .find(|rep| rep.repeat_id == r)
            .unwrap()
            .coverage;
        let sweep_cov = sweep
            .reports
            .iter()
            .find(|rep| rep.repeat_id == r)
            .unwrap()
            .coverage;
        assert_eq!(base_cov, sweep_cov, "repeat {r}");
    }
}

#[test]
fn wcp_with_true_weights_restores_coverage() {
    let mut cfg = config(CorruptionKind::Under, 6_000, 51);
    cfg.methods = vec![Method::NaiveCp, Method::WcpTrue];
    cfg.repeats = 6;
    let out = run_experiment(&cfg).unwrap();
    let cov = |m: Method| {
        out.aggregates
            .iter()
            .find(|a| a.method == m.name())
            .unwrap()
            .coverage_mean
    };
    // the reweighted thresholds correct the bias the naive ones carry
    assert!(cov(Method::WcpTrue) > cov(Method::NaiveCp));
    assert!(cov(Method::WcpTrue) >= 0.86, "wcp {}", cov(Method::WcpTrue));
}

#[test]
fn true_weight_methods_demand_generator_params() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = generate(1_000, 2, CorruptionKind::Under).unwrap();
    let csv = dir.path().join("d.csv");
    conformal_pi::data::write_csv(&ds, &csv).unwrap();
    let mut cfg = config(CorruptionKind::Under, 1_000, 2);
    cfg.source = DataSource::Csv {
        path: csv.to_string_lossy().into_owned(),
        params: None,
    };
    cfg.methods = vec![Method::PcpTrue];
    cfg.repeats = 1;
    match run_experiment(&cfg) {
        Err(conformal_pi::Error::GeneratorRequired) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected a generator-required error"),
    }
}

#[test]
fn hard_mechanism_weights_are_harder_to_estimate() {
    // out-of-sample log-loss of the logistic corruption model must be
    // strictly worse on the hard mechanism than on the default one
    for seed in 0..5u64 {
        let mut losses = Vec::new();
        for kind in [CorruptionKind::Under, CorruptionKind::Hard] {
            let (ds, _) = generate(8_000, seed, kind).unwrap();
            let z: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.privileged.clone()).collect();
            let m0: Vec<bool> = ds.samples.iter().map(|s| !s.corrupted).collect();
            let model =
                fit_logistic(&z[..6_000], &m0[..6_000], &LogisticFitConfig::default()).unwrap();
            let mut loss = 0.0;
            for i in 6_000..8_000 {
                let p = model.prob_uncorrupted(&z[i]);
                loss -= if m0[i] { p.ln() } else { (1.0 - p).ln() };
            }
            losses.push(loss / 2_000.0);
        }
        assert!(
            losses[1] > losses[0],
            "seed {seed}: hard log-loss {} not above default {}",
            losses[1],
            losses[0]
        );
    }
}

#[test]
fn svg_outputs_are_well_formed() {
    let mut cfg = config(CorruptionKind::Under, 2_000, 41);
    cfg.methods = vec![Method::NaiveCp, Method::Ui];
    cfg.repeats = 2;
    let out = run_experiment(&cfg).unwrap();
    let bars = conformal_pi_harness::plot::coverage_bars("t", &out.aggregates, 0.9);
    assert!(bars.starts_with("<svg") && bars.trim_end().ends_with("</svg>"));
    assert!(bars.contains("NAIVE_CP"));

    let sweep = sweep_constant_delta(&SweepConfig {
        base: {
            let mut c = config(CorruptionKind::Under, 2_000, 41);
            c.methods = vec![Method::PcpTrue];
            c.repeats = 2;
            c
        },
        deltas: vec![-0.5, 0.0, 0.5],
    })
    .unwrap();
    let line = conformal_pi_harness::plot::delta_sweep_plot("t", &sweep, 0.9);
    assert!(line.starts_with("<svg") && line.contains("path"));

    let region = conformal_pi_harness::sweep::sweep_region(&conformal_pi_harness::config::RegionConfig {
        base: {
            let mut c = config(CorruptionKind::Under, 2_000, 41);
            c.methods = vec![Method::PcpTrue];
            c.repeats = 1;
            c
        },
        delta_min_range: (-2.0, 0.0),
        delta_max_range: (0.0, 2.0),
        rows: 4,
        cols: 4,
        shape: conformal_pi::weights::ErrorShape::Uniform,
        y_draws: 5_000,
        coverage_band: 0.01,
    })
    .unwrap();
    let heat = conformal_pi_harness::plot::region_heatmap("t", &region);
    assert!(heat.starts_with("<svg") && heat.contains("rect"));
}

#[test]
fn cli_gen_run_selftest_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let bin = env!("CARGO_BIN_EXE_cpi");

    let status = Command::new(bin)
        .args(["gen", "--kind", "over", "--n", "1200", "--seed", "4"])
        .arg("--out")
        .arg(&csv)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(csv.exists());
    assert!(dir.path().join("d.params.json").exists());

    let cfg = serde_json::json!({
        "source": {"csv": {"path": csv.to_string_lossy(), "params": dir.path().join("d.params.json").to_string_lossy()}},
        "methods": ["NAIVE_CP", "UI"],
        "repeats": 2
    });
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out-dir")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("out/metrics.csv").exists());
    assert!(dir.path().join("out/aggregate.csv").exists());
    assert!(dir.path().join("out/coverage.svg").exists());

    let status = Command::new(bin).arg("selftest").status().unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn cli_sweep_region_triply_emit_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_cpi");
    let source = serde_json::json!({"generator": {"kind": "under", "n": 2000, "seed": 6}});

    let sweep_cfg = serde_json::json!({
        "source": source,
        "methods": ["PCP_TRUE"],
        "repeats": 2,
        "deltas": [0.0, 0.3]
    });
    let p = dir.path().join("sweep.json");
    std::fs::write(&p, serde_json::to_string(&sweep_cfg).unwrap()).unwrap();
    let status = Command::new(bin)
        .args(["sweep-delta", "--config"])
        .arg(&p)
        .arg("--out-dir")
        .arg(dir.path().join("sw"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("sw/delta_sweep.csv").exists());
    assert!(dir.path().join("sw/delta_sweep.svg").exists());

    let region_cfg = serde_json::json!({
        "source": source,
        "methods": ["PCP_TRUE"],
        "repeats": 1,
        "delta_min_range": [-2.0, 0.0],
        "delta_max_range": [0.0, 2.0],
        "rows": 5,
        "cols": 5,
        "shape": "uniform",
        "y_draws": 4000
    });
    let p = dir.path().join("region.json");
    std::fs::write(&p, serde_json::to_string(&region_cfg).unwrap()).unwrap();
    let status = Command::new(bin)
        .args(["region", "--config"])
        .arg(&p)
        .arg("--out-dir")
        .arg(dir.path().join("rg"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("rg/region.csv").exists());
    assert!(dir.path().join("rg/region.svg").exists());

    let triply_cfg = serde_json::json!({
        "source": source,
        "methods": ["TRIPLY"],
        "repeats": 2,
        "learner": {"oracle_draws": 300}
    });
    let p = dir.path().join("triply.json");
    std::fs::write(&p, serde_json::to_string(&triply_cfg).unwrap()).unwrap();
    let status = Command::new(bin)
        .args(["triply", "--config"])
        .arg(&p)
        .arg("--out-dir")
        .arg(dir.path().join("tp"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let matrix = std::fs::read_to_string(dir.path().join("tp/triply_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 9, "header plus eight cells");
}

#[test]
fn cli_exit_codes_distinguish_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_cpi");

    // malformed JSON is a configuration error
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(&bad)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // unknown generator kind is a configuration error
    let status = Command::new(bin)
        .args(["gen", "--kind", "sideways", "--n", "100", "--out"])
        .arg(dir.path().join("x.csv"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // missing data file is a data error
    let cfg = serde_json::json!({
        "source": {"csv": {"path": dir.path().join("nope.csv").to_string_lossy()}},
        "methods": ["NAIVE_CP"],
        "repeats": 1
    });
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(&cfg_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // true-weight methods on a params-free CSV are a data error
    let (ds, _) = generate(1_000, 2, CorruptionKind::Under).unwrap();
    let csv = dir.path().join("d.csv");
    conformal_pi::data::write_csv(&ds, &csv).unwrap();
    let cfg = serde_json::json!({
        "source": {"csv": {"path": csv.to_string_lossy()}},
        "methods": ["PCP_TRUE"],
        "repeats": 1
    });
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(&cfg_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}
