//! Delta sweeps, validity-region cross-checks, and the oracle/degenerate
//! robustness matrix.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use conformal_pi::calibrate::{
    cp_threshold, pcp_calibrate_signed,
};
use conformal_pi::data::{split, CoverageReport};
use conformal_pi::error::{Error, Result};
use conformal_pi::models::{
    oracle_predict, OracleKind, OracleModel, OraclePrediction,
};
use conformal_pi::scores::{invert, score, ModelEval};
use conformal_pi::synth::GeneratorParams;
use conformal_pi::weights::{
    general_error_verdict, signed_walk_index, theoretical_boundary, BoundaryCurve, CellVerdict, GeneralErrors, VerdictCase, WeightErrorProfile,
};

use crate::config::{ExperimentConfig, RegionConfig, SweepConfig};
use crate::experiment::{
    aggregate, fit_repeat, load_source, stream_seed, AggregateRow, FittedRepeat, PreparedData,
};

pub struct DeltaSweepOutput {
    /// One report per (delta, repeat); method is "PCP(delta)".
    pub reports: Vec<CoverageReport>,
    pub aggregates_per_delta: Vec<(f64, AggregateRow)>,
    /// Mean of W_{n+1}/(n+1) across repeats: the lower endpoint of the
    /// constant-error validity interval is its negation.
    pub mean_weight_scale: f64,
}

/// Run privileged calibration with every weight shifted by each delta in
/// the grid, across repeats. Shifted weights may be negative; the signed
/// walk handles them.
pub fn sweep_constant_delta(cfg: &SweepConfig) -> Result<DeltaSweepOutput> {
    cfg.base.validate().map_err(Error::Config)?;
    if cfg.deltas.is_empty() {
        return Err(Error::Config("empty delta grid".into()));
    }
    let prepared = load_source(&cfg.base.source)?;
    if prepared.params.is_none() {
        return Err(Error::GeneratorRequired);
    }

    struct RepeatSweep {
        reports: Vec<(f64, CoverageReport)>,
        weight_scale: f64,
    }

    let per_repeat: Result<Vec<RepeatSweep>> = (0..cfg.base.repeats)
        .into_par_iter()
        .map(|r| {
            let fit = fit_repeat(&cfg.base, &prepared, r, true, false)?;
            let w = fit.weights_true.as_ref().expect("true weights");
            let score_fn = |i: usize, y: f64| fit.score_at(i, y);
            let mut reports = Vec::new();
            for &delta in &cfg.deltas {
                let wd: Vec<f64> = w.clone();
                let t = pcp_calibrate_signed(
                    &fit.data,
                    &fit.splits,
                    &score_fn,
                    &|i| wd[i] + delta,
                    cfg.base.alpha,
                    cfg.base.beta,
                )?;
                let (cov, len) = evaluate(&fit, t.value);
                reports.push((
                    delta,
                    CoverageReport::from_outcomes("PCP", r, &cov, &len),
                ));
            }
            // W_{n+1}/(n+1) over the uncorrupted calibration profile with
            // the mean test weight standing in for the test atom
            let cal = fit.splits.full_cal();
            let uc: Vec<usize> = cal
                .iter()
                .copied()
                .filter(|&i| !fit.data.samples[i].corrupted)
                .collect();
            let sum_uc: f64 = uc.iter().map(|&i| w[i]).sum();
            let mean_test = fit.splits.test.iter().map(|&i| w[i]).sum::<f64>()
                / fit.splits.test.len() as f64;
            let weight_scale = (sum_uc + mean_test) / (uc.len() as f64 + 1.0);
            Ok(RepeatSweep {
                reports,
                weight_scale,
            })
        })
        .collect();
    let per_repeat = per_repeat?;

    let mut reports = Vec::new();
    let mut aggregates_per_delta = Vec::new();
    for &delta in &cfg.deltas {
        let rows: Vec<CoverageReport> = per_repeat
            .iter()
            .flat_map(|rs| {
                rs.reports
                    .iter()
                    .filter(|(d, _)| *d == delta)
                    .map(|(_, r)| r.clone())
            })
            .collect();
        let agg = aggregate(&rows).remove(0);
        aggregates_per_delta.push((delta, agg));
        reports.extend(rows);
    }
    let mean_weight_scale = per_repeat.iter().map(|r| r.weight_scale).sum::<f64>()
        / per_repeat.len() as f64;
    Ok(DeltaSweepOutput {
        reports,
        aggregates_per_delta,
        mean_weight_scale,
    })
}

fn evaluate(fit: &FittedRepeat, threshold: f64) -> (Vec<bool>, Vec<f64>) {
    let scale = fit.transform.label_scale();
    let mut covered = Vec::with_capacity(fit.splits.test.len());
    let mut lengths = Vec::with_capacity(fit.splits.test.len());
    for &t in &fit.splits.test {
        let y = fit.data.samples[t].clean_label.expect("clean label known");
        covered.push(fit.score_at(t, y) <= threshold);
        lengths.push(invert(&fit.evals[t], threshold).length() * scale);
    }
    (covered, lengths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmpiricalCell {
    Valid,
    Invalid,
    Boundary,
    Undefined,
}

pub struct RegionCell {
    pub row: usize,
    pub col: usize,
    pub delta_min: f64,
    pub delta_max: f64,
    pub theory: CellVerdict,
    pub empirical: EmpiricalCell,
}

pub struct RegionOutput {
    pub cells: Vec<RegionCell>,
    pub boundary: BoundaryCurve,
    pub delta_min_values: Vec<f64>,
    pub delta_max_values: Vec<f64>,
    /// Agreement rate over cells that are neither undefined nor boundary
    /// on either side.
    pub agreement: f64,
    pub compared_cells: usize,
}

/// Fix one calibration draw and one test point, then compare the
/// theoretical validity verdict against empirical conditional coverage
/// per (delta_min, delta_max) cell, using the same normalized error
/// draws on both sides.
pub fn sweep_region(cfg: &RegionConfig) -> Result<RegionOutput> {
    cfg.base.validate().map_err(Error::Config)?;
    let prepared = load_source(&cfg.base.source)?;
    let params = prepared
        .params
        .clone()
        .ok_or(Error::GeneratorRequired)?;
    let fit = fit_repeat(&cfg.base, &prepared, 0, true, false)?;
    let w = fit.weights_true.as_ref().expect("true weights");
    let alpha = cfg.base.alpha;

    // score-sorted uncorrupted calibration profile, test weight last
    let cal = fit.splits.full_cal();
    let mut pairs: Vec<(f64, f64)> = cal
        .iter()
        .filter(|&&i| !fit.data.samples[i].corrupted)
        .map(|&i| {
            let y = fit.data.samples[i].observed_label.expect("label");
            (fit.score_at(i, y), w[i])
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let sorted_scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let sorted_weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();

    let test_idx = fit.splits.test[0];
    let mut profile_weights = sorted_weights.clone();
    profile_weights.push(w[test_idx]);
    let profile = WeightErrorProfile::new(profile_weights.clone())?;

    // conditional label draws at the fixed test point, in original units,
    // scored through the fitted model after standardization
    let sample = &prepared.dataset.samples[test_idx];
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.base.master_seed, 0, 11));
    let mut test_scores: Vec<f64> = (0..cfg.y_draws)
        .map(|_| {
            let y_raw = params.draw_label(&sample.features, &sample.privileged, &mut rng);
            let y_std = fit.transform.label_to_std(y_raw);
            score(&fit.evals[test_idx], y_std)
        })
        .collect();
    test_scores.sort_unstable_by(f64::total_cmp);
    let coverage_of = |threshold: f64| -> f64 {
        if threshold == f64::INFINITY {
            1.0
        } else {
            test_scores.partition_point(|&s| s <= threshold) as f64 / test_scores.len() as f64
        }
    };

    let kw_true = signed_walk_index(&profile_weights, 1.0 - alpha);
    let q_true = if kw_true <= sorted_scores.len() {
        sorted_scores[kw_true - 1]
    } else {
        f64::INFINITY
    };
    let cov_true = coverage_of(q_true);

    let lin = |lo: f64, hi: f64, m: usize, i: usize| {
        if m == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (m as f64 - 1.0)
        }
    };
    let delta_min_values: Vec<f64> = (0..cfg.rows)
        .map(|i| lin(cfg.delta_min_range.0, cfg.delta_min_range.1, cfg.rows, i))
        .collect();
    let delta_max_values: Vec<f64> = (0..cfg.cols)
        .map(|j| lin(cfg.delta_max_range.0, cfg.delta_max_range.1, cfg.cols, j))
        .collect();

    let n_atoms = profile_weights.len();
    let mut cells = Vec::with_capacity(cfg.rows * cfg.cols);
    let mut agree = 0usize;
    let mut compared = 0usize;
    for (i, &dmin) in delta_min_values.iter().enumerate() {
        for (j, &dmax) in delta_max_values.iter().enumerate() {
            if dmin >= dmax {
                cells.push(RegionCell {
                    row: i,
                    col: j,
                    delta_min: dmin,
                    delta_max: dmax,
                    theory: CellVerdict::Undefined,
                    empirical: EmpiricalCell::Undefined,
                });
                continue;
            }
            let mut cell_rng = ChaCha8Rng::seed_from_u64(stream_seed(
                cfg.base.master_seed,
                (i as u64) << 20 | j as u64,
                12,
            ));
            let tilde: Vec<f64> = (0..n_atoms).map(|_| cfg.shape.sample(&mut cell_rng)).collect();
            let deltas: Vec<f64> = tilde.iter().map(|&t| dmin + t * (dmax - dmin)).collect();
            let errors = GeneralErrors::new(deltas.clone(), dmin, dmax)?;
            let theory = match general_error_verdict(&profile, &errors, alpha) {
                Ok(v) if v.case_wcp == VerdictCase::Boundary => CellVerdict::Boundary,
                Ok(v) if v.q_hat_ge_q_wcp => CellVerdict::Valid,
                Ok(_) => CellVerdict::Invalid,
                Err(Error::SingularNormalization) => CellVerdict::Boundary,
                Err(e) => return Err(e),
            };
            let perturbed: Vec<f64> = profile_weights
                .iter()
                .zip(&deltas)
                .map(|(wv, d)| wv + d)
                .collect();
            let k_hat = signed_walk_index(&perturbed, 1.0 - alpha);
            let q_hat = if k_hat <= sorted_scores.len() {
                sorted_scores[k_hat - 1]
            } else {
                f64::INFINITY
            };
            let cov_hat = coverage_of(q_hat);
            let empirical = if (cov_hat - cov_true).abs() <= cfg.coverage_band {
                EmpiricalCell::Boundary
            } else if cov_hat >= cov_true {
                EmpiricalCell::Valid
            } else {
                EmpiricalCell::Invalid
            };
            if empirical != EmpiricalCell::Boundary
                && empirical != EmpiricalCell::Undefined
                && theory != CellVerdict::Boundary
                && theory != CellVerdict::Undefined
            {
                compared += 1;
                let same = matches!(
                    (theory, empirical),
                    (CellVerdict::Valid, EmpiricalCell::Valid)
                        | (CellVerdict::Invalid, EmpiricalCell::Invalid)
                );
                if same {
                    agree += 1;
                }
            }
            cells.push(RegionCell {
                row: i,
                col: j,
                delta_min: dmin,
                delta_max: dmax,
                theory,
                empirical,
            });
        }
    }

    // overlay curves from the shape's mean normalized error
    let tilde_mean = vec![cfg.shape.mean(); n_atoms];
    let boundary = theoretical_boundary(&profile, &tilde_mean, alpha)?;

    Ok(RegionOutput {
        cells,
        boundary,
        delta_min_values,
        delta_max_values,
        agreement: if compared == 0 {
            1.0
        } else {
            agree as f64 / compared as f64
        },
        compared_cells: compared,
    })
}

pub fn write_region_csv<P: AsRef<std::path::Path>>(
    path: P,
    out: &RegionOutput,
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "row,col,delta_min,delta_max,theory,empirical")?;
    for c in &out.cells {
        let theory = match c.theory {
            CellVerdict::Valid => "valid",
            CellVerdict::Invalid => "invalid",
            CellVerdict::Undefined => "undefined",
            CellVerdict::Boundary => "boundary",
        };
        let emp = match c.empirical {
            EmpiricalCell::Valid => "valid",
            EmpiricalCell::Invalid => "invalid",
            EmpiricalCell::Undefined => "undefined",
            EmpiricalCell::Boundary => "boundary",
        };
        writeln!(
            f,
            "{},{},{:.6},{:.6},{},{}",
            c.row, c.col, c.delta_min, c.delta_max, theory, emp
        )?;
    }
    Ok(())
}

/// One cell of the robustness matrix: which variant each component uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixCell {
    pub qr_oracle: bool,
    pub weights_oracle: bool,
    pub imputer_oracle: bool,
}

impl MatrixCell {
    pub fn label(&self) -> String {
        let t = |b: bool| if b { "oracle" } else { "degenerate" };
        format!(
            "qr={} weights={} imputer={}",
            t(self.qr_oracle),
            t(self.weights_oracle),
            t(self.imputer_oracle)
        )
    }
}

pub struct MatrixRow {
    pub cell: MatrixCell,
    pub coverage_mean: f64,
    pub coverage_se: f64,
    pub length_mean: f64,
    pub reports: Vec<CoverageReport>,
    /// Union dominance (union coverage >= every component coverage)
    /// held exactly on every repeat.
    pub dominance_held: bool,
}

/// Run the 2^3 oracle/degenerate matrix of (quantile model, privileged
/// weights, imputer) on synthetic data.
pub fn triply_matrix(cfg: &ExperimentConfig) -> Result<Vec<MatrixRow>> {
    cfg.validate().map_err(Error::Config)?;
    let prepared = load_source(&cfg.source)?;
    let params = prepared.params.clone().ok_or(Error::GeneratorRequired)?;

    struct RepeatMatrix {
        // per cell: (coverage, mean_length, n_infinite, dominance)
        cells: Vec<(f64, f64, usize, bool)>,
    }

    let cells: Vec<MatrixCell> = (0..8)
        .map(|b| MatrixCell {
            qr_oracle: b & 4 != 0,
            weights_oracle: b & 2 != 0,
            imputer_oracle: b & 1 != 0,
        })
        .collect();

    let per_repeat: Result<Vec<RepeatMatrix>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let ctx = build_matrix_repeat(cfg, &prepared, params.clone(), r)?;
            let mut out = Vec::with_capacity(8);
            for cell in &cells {
                out.push(evaluate_matrix_cell(cfg, &ctx, cell));
            }
            Ok(RepeatMatrix { cells: out })
        })
        .collect();
    let per_repeat = per_repeat?;

    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let covs: Vec<f64> = per_repeat.iter().map(|rm| rm.cells[c].0).collect();
            let lens: Vec<f64> = per_repeat
                .iter()
                .map(|rm| rm.cells[c].1)
                .filter(|l| l.is_finite())
                .collect();
            let dominance_held = per_repeat.iter().all(|rm| rm.cells[c].3);
            let reports: Vec<CoverageReport> = per_repeat
                .iter()
                .enumerate()
                .map(|(r, rm)| CoverageReport {
                    method: cell.label(),
                    repeat_id: r as u32,
                    coverage: rm.cells[c].0,
                    mean_length: rm.cells[c].1,
                    n_infinite: rm.cells[c].2,
                    n_test: 0,
                })
                .collect();
            MatrixRow {
                cell: *cell,
                coverage_mean: crate::experiment::mean(&covs),
                coverage_se: crate::experiment::standard_error(&covs),
                length_mean: if lens.is_empty() {
                    f64::INFINITY
                } else {
                    crate::experiment::mean(&lens)
                },
                reports,
                dominance_held,
            }
        })
        .collect())
}

struct MatrixRepeat {
    splits: conformal_pi::data::SplitIndices,
    data: conformal_pi::data::Dataset,
    label_scale: f64,
    /// Oracle quantile-pair evaluations (standardized units) for every
    /// calibration and test sample.
    oracle_evals: Vec<Option<ModelEval>>,
    /// Imputed labels (standardized) for corrupted calibration samples.
    oracle_imputed: Vec<Option<f64>>,
    weights_full: Vec<f64>,
    weights_half: Vec<f64>,
}

fn build_matrix_repeat(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    params: Arc<GeneratorParams>,
    repeat_id: u32,
) -> Result<MatrixRepeat> {
    let n = prepared.dataset.len();
    let split_seed = stream_seed(cfg.master_seed, repeat_id as u64, 1);
    let splits = split(n, crate::experiment::FRACTIONS, true, split_seed)?;
    let (data, transform) = conformal_pi::data::standardize(&prepared.dataset, &splits.train)?;

    let mut oracle = OracleModel::new(OracleKind::QrOracle, params.clone());
    oracle.mc_draws = cfg.learner.oracle_draws;
    let imputer = OracleModel::new(OracleKind::ImputeOracle, params.clone());

    let mut needed: Vec<usize> = splits.full_cal();
    needed.extend_from_slice(&splits.test);

    // Monte Carlo quantile pairs per point, deterministic substreams
    let pairs: Vec<(usize, ModelEval)> = needed
        .par_iter()
        .map(|&i| {
            let raw = &prepared.dataset.samples[i];
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                cfg.master_seed,
                ((repeat_id as u64) << 32) | i as u64,
                6,
            ));
            let p = oracle_predict(&oracle, &raw.features, &raw.privileged, None, cfg.alpha, &mut rng)
                .expect("oracle quantiles");
            let eval = match p {
                OraclePrediction::Quantiles { lo, hi } => ModelEval::Quantiles {
                    lo: transform.label_to_std(lo),
                    hi: transform.label_to_std(hi),
                },
                _ => unreachable!(),
            };
            (i, eval)
        })
        .collect();
    let mut oracle_evals = vec![None; n];
    for (i, e) in pairs {
        oracle_evals[i] = Some(e);
    }

    let mut oracle_imputed = vec![None; n];
    for &i in &splits.full_cal() {
        if data.samples[i].corrupted {
            let raw = &prepared.dataset.samples[i];
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                cfg.master_seed,
                ((repeat_id as u64) << 32) | i as u64,
                7,
            ));
            let p = oracle_predict(&imputer, &raw.features, &raw.privileged, Some(i), cfg.alpha, &mut rng)?;
            if let OraclePrediction::LabelDraw(v) = p {
                oracle_imputed[i] = Some(transform.label_to_std(v));
            }
        }
    }

    let marginal = params.marginal_corruption();
    let weights_full: Vec<f64> = params
        .probs
        .iter()
        .map(|&p| (1.0 - marginal) / (1.0 - p))
        .collect();
    let half_marginal = marginal / 2.0;
    let weights_half: Vec<f64> = params
        .probs
        .iter()
        .map(|&p| (1.0 - half_marginal) / (1.0 - p / 2.0))
        .collect();

    Ok(MatrixRepeat {
        splits,
        data,
        label_scale: transform.label_scale(),
        oracle_evals,
        oracle_imputed,
        weights_full,
        weights_half,
    })
}

fn evaluate_matrix_cell(
    cfg: &ExperimentConfig,
    ctx: &MatrixRepeat,
    cell: &MatrixCell,
) -> (f64, f64, usize, bool) {
    let degenerate = ModelEval::Quantiles { lo: 0.0, hi: 0.0 };
    let eval_of = |i: usize| -> ModelEval {
        if cell.qr_oracle {
            ctx.oracle_evals[i].expect("oracle eval precomputed")
        } else {
            degenerate
        }
    };
    let score_fn = |i: usize, y: f64| score(&eval_of(i), y);
    let weights = if cell.weights_oracle {
        &ctx.weights_full
    } else {
        &ctx.weights_half
    };

    // The quantile-model slot contributes its own raw set: the oracle
    // variant covers conditionally by construction, the degenerate one
    // is the single point {0}. On the shared score scale both are the
    // zero-threshold inversion.
    let t_qr = 0.0;
    let t_pcp = pcp_calibrate_signed(
        &ctx.data,
        &ctx.splits,
        &score_fn,
        &|i| weights[i],
        cfg.alpha,
        cfg.beta,
    )
    .expect("pcp on matrix cell");
    // imputation component: conformal calibration over imputed labels
    let cal = ctx.splits.full_cal();
    let imp_scores: Vec<f64> = cal
        .iter()
        .map(|&i| {
            let s = &ctx.data.samples[i];
            let y = if s.corrupted {
                if cell.imputer_oracle {
                    ctx.oracle_imputed[i].expect("imputed label precomputed")
                } else {
                    0.0
                }
            } else {
                s.observed_label.expect("label")
            };
            score_fn(i, y)
        })
        .collect();
    let t_imp = cp_threshold(&imp_scores, cfg.alpha);

    let thresholds = [t_qr, t_pcp.value, t_imp.value];
    let t_union = thresholds.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut covered_union = 0usize;
    let mut covered_parts = [0usize; 3];
    let mut lengths = Vec::with_capacity(ctx.splits.test.len());
    for &t in &ctx.splits.test {
        let y = ctx.data.samples[t].clean_label.expect("clean label");
        let s = score_fn(t, y);
        if s <= t_union {
            covered_union += 1;
        }
        for (k, &thr) in thresholds.iter().enumerate() {
            if s <= thr {
                covered_parts[k] += 1;
            }
        }
        lengths.push(invert(&eval_of(t), t_union).length() * ctx.label_scale);
    }
    let n_test = ctx.splits.test.len();
    let dominance = covered_parts.iter().all(|&c| covered_union >= c);
    let finite: Vec<f64> = lengths.iter().copied().filter(|l| l.is_finite()).collect();
    let mean_length = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    (
        covered_union as f64 / n_test as f64,
        mean_length,
        lengths.len() - finite.len(),
        dominance,
    )
}

pub fn write_matrix_csv<P: AsRef<std::path::Path>>(path: P, rows: &[MatrixRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "qr,weights,imputer,coverage_mean,coverage_se,length_mean,dominance_held"
    )?;
    for r in rows {
        let t = |b: bool| if b { "oracle" } else { "degenerate" };
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{:.6},{}",
            t(r.cell.qr_oracle),
            t(r.cell.weights_oracle),
            t(r.cell.imputer_oracle),
            r.coverage_mean,
            r.coverage_se,
            r.length_mean,
            r.dominance_held
        )?;
    }
    Ok(())
}

pub fn write_delta_csv<P: AsRef<std::path::Path>>(
    path: P,
    out: &DeltaSweepOutput,
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "delta,coverage_mean,coverage_se,length_mean")?;
    for (d, a) in &out.aggregates_per_delta {
        writeln!(
            f,
            "{:.6},{:.6},{:.6},{:.6}",
            d, a.coverage_mean, a.coverage_se, a.length_mean
        )?;
    }
    Ok(())
}

