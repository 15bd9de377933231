//! Multi-repeat experiment orchestration: split, standardize, fit,
//! calibrate every requested method, and evaluate coverage and length on
//! the test split.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use conformal_pi::calibrate::{
    build_error_sampler, naive_cp, naive_impute_calibrate, pcp_calibrate,
    reference_errors, ui_calibrate, CalibratedThreshold, WeightedQuantileEngine,
};
use conformal_pi::data::{
    split, standardize, CoverageReport, Dataset, SplitIndices, StandardizeTransform,
};
use conformal_pi::error::{Error, Result};
use conformal_pi::models::{
    fit_least_squares, fit_logistic, fit_quantile, fit_quantile_early_stop, LogisticFitConfig,
    QuantileFitConfig,
};
use conformal_pi::scores::{invert, score, ModelEval};
use conformal_pi::synth::{generate, read_params_json, true_weight, GeneratorParams};

use crate::config::{DataSource, ExperimentConfig, Method, WeightSource};

/// Split fractions of the experimental protocol:
/// train/val/cal/test = 50/10/20/20.
pub const FRACTIONS: [f64; 4] = [0.5, 0.1, 0.2, 0.2];

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic substream seed keyed by (master, task, purpose).
pub fn stream_seed(master: u64, task: u64, purpose: u64) -> u64 {
    splitmix64(splitmix64(master ^ task.wrapping_mul(0xD134_2543_DE82_EF95)) ^ purpose)
}

pub struct PreparedData {
    pub dataset: Dataset,
    pub params: Option<Arc<GeneratorParams>>,
}

pub fn load_source(source: &DataSource) -> Result<PreparedData> {
    match source {
        DataSource::Generator { kind, n, seed } => {
            let (dataset, params) = generate(*n, *seed, *kind)?;
            Ok(PreparedData {
                dataset,
                params: Some(Arc::new(params)),
            })
        }
        DataSource::Csv { path, params } => {
            let dataset = conformal_pi::data::read_csv(path)?;
            let params = match params {
                Some(p) => Some(Arc::new(read_params_json(p)?)),
                None => None,
            };
            Ok(PreparedData { dataset, params })
        }
    }
}

/// Everything one repeat fits before calibration.
pub struct FittedRepeat {
    pub repeat_id: u32,
    pub splits: SplitIndices,
    pub data: Dataset,
    pub transform: StandardizeTransform,
    /// Per-sample quantile-pair evaluations of the fitted base model.
    pub evals: Vec<ModelEval>,
    /// Per-sample label-regression predictions g_hat(x, z).
    pub ghat: Vec<f64>,
    pub weights_true: Option<Vec<f64>>,
    pub weights_est: Option<Vec<f64>>,
}

impl FittedRepeat {
    pub fn score_at(&self, i: usize, y: f64) -> f64 {
        score(&self.evals[i], y)
    }
}

fn rows(data: &Dataset, idx: &[usize], with_pi: bool) -> Vec<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            let s = &data.samples[i];
            if with_pi {
                let mut v = s.features.clone();
                v.extend_from_slice(&s.privileged);
                v
            } else {
                s.features.clone()
            }
        })
        .collect()
}

fn uncorrupted(data: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter()
        .copied()
        .filter(|&i| !data.samples[i].corrupted)
        .collect()
}

fn labels(data: &Dataset, idx: &[usize]) -> Vec<f64> {
    idx.iter()
        .map(|&i| data.samples[i].observed_label.expect("label present"))
        .collect()
}

/// Split, standardize on train, fit the quantile pair with validation
/// early stop, fit the label regression, and estimate weights.
pub fn fit_repeat(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    repeat_id: u32,
    need_true_weights: bool,
    need_est_weights: bool,
) -> Result<FittedRepeat> {
    let n = prepared.dataset.len();
    let split_seed = stream_seed(cfg.master_seed, repeat_id as u64, 1);
    let splits = split(n, FRACTIONS, true, split_seed)?;
    let (data, transform) = standardize(&prepared.dataset, &splits.train)?;

    let tr_uc = uncorrupted(&data, &splits.train);
    let val_uc = uncorrupted(&data, &splits.val);
    let x_tr = rows(&data, &tr_uc, false);
    let y_tr = labels(&data, &tr_uc);
    let x_val = rows(&data, &val_uc, false);
    let y_val = labels(&data, &val_uc);

    let qcfg = QuantileFitConfig {
        step: cfg.learner.qr_step,
        epochs: cfg.learner.qr_epochs,
        momentum: cfg.learner.qr_momentum,
        seed: stream_seed(cfg.master_seed, repeat_id as u64, 2),
    };
    let fit_tau = |tau: f64| {
        if val_uc.is_empty() {
            fit_quantile(&x_tr, &y_tr, tau, &qcfg)
        } else {
            fit_quantile_early_stop(
                &x_tr,
                &y_tr,
                &x_val,
                &y_val,
                tau,
                &qcfg,
                cfg.learner.qr_patience,
            )
        }
    };
    let q_lo = fit_tau(cfg.alpha / 2.0)?;
    let q_hi = fit_tau(1.0 - cfg.alpha / 2.0)?;
    let evals: Vec<ModelEval> = data
        .samples
        .iter()
        .map(|s| ModelEval::Quantiles {
            lo: q_lo.predict(&s.features),
            hi: q_hi.predict(&s.features),
        })
        .collect();

    let xz_tr = rows(&data, &tr_uc, true);
    let g_model = fit_least_squares(&xz_tr, &y_tr)?;
    let ghat: Vec<f64> = data
        .samples
        .iter()
        .map(|s| {
            let mut v = s.features.clone();
            v.extend_from_slice(&s.privileged);
            g_model.predict(&v)
        })
        .collect();

    let weights_true = if need_true_weights {
        let params = prepared.params.as_ref().ok_or(Error::GeneratorRequired)?;
        Some(
            (0..n)
                .map(|i| true_weight(params, i))
                .collect::<Result<Vec<f64>>>()?,
        )
    } else {
        None
    };

    let weights_est = if need_est_weights {
        let mut tv: Vec<usize> = splits.train.clone();
        tv.extend_from_slice(&splits.val);
        let z_tv: Vec<Vec<f64>> = tv.iter().map(|&i| data.samples[i].privileged.clone()).collect();
        let m0: Vec<bool> = tv.iter().map(|&i| !data.samples[i].corrupted).collect();
        let lcfg = LogisticFitConfig {
            step: cfg.learner.logistic_step,
            epochs: cfg.learner.logistic_epochs,
            l2: cfg.learner.l2,
            seed: stream_seed(cfg.master_seed, repeat_id as u64, 3),
        };
        let model = fit_logistic(&z_tv, &m0, &lcfg)?;
        let marginal_uc = m0.iter().filter(|&&b| b).count() as f64 / m0.len() as f64;
        Some(
            data.samples
                .iter()
                .map(|s| marginal_uc / model.prob_uncorrupted(&s.privileged))
                .collect(),
        )
    } else {
        None
    };

    Ok(FittedRepeat {
        repeat_id,
        splits,
        data,
        transform,
        evals,
        ghat,
        weights_true,
        weights_est,
    })
}

/// Coverage and per-point set lengths for one scalar threshold shared by
/// every test point.
fn evaluate_scalar(fit: &FittedRepeat, threshold: f64) -> (Vec<bool>, Vec<f64>) {
    let scale = fit.transform.label_scale();
    let mut covered = Vec::with_capacity(fit.splits.test.len());
    let mut lengths = Vec::with_capacity(fit.splits.test.len());
    for &t in &fit.splits.test {
        let y = fit.data.samples[t].clean_label.expect("clean label known");
        covered.push(fit.score_at(t, y) <= threshold);
        let set = invert(&fit.evals[t], threshold);
        lengths.push(set.length() * scale);
    }
    (covered, lengths)
}

pub struct RepeatOutcome {
    pub repeat_id: u32,
    pub thresholds: BTreeMap<String, f64>,
    pub reports: Vec<CoverageReport>,
}

fn ui_threshold(
    cfg: &ExperimentConfig,
    fit: &FittedRepeat,
) -> Result<CalibratedThreshold> {
    let gh = fit.ghat.clone();
    let g_fn = move |i: usize| gh[i];
    let refs = reference_errors(&fit.data, &fit.splits, &g_fn);
    let mut tv: Vec<usize> = fit.splits.train.clone();
    tv.extend_from_slice(&fit.splits.val);
    let pop_z: Vec<Vec<f64>> = tv
        .iter()
        .map(|&i| fit.data.samples[i].privileged.clone())
        .collect();
    let tv_uc = uncorrupted(&fit.data, &tv);
    let z_uc: Vec<Vec<f64>> = tv_uc
        .iter()
        .map(|&i| fit.data.samples[i].privileged.clone())
        .collect();
    let y_uc = labels(&fit.data, &tv_uc);
    let k_or_bins = match cfg.sampler.kind {
        conformal_pi::calibrate::SamplerKind::KMeans => cfg.sampler.k,
        _ => cfg.sampler.bins,
    };
    let sampler = build_error_sampler(
        cfg.sampler.kind,
        &refs,
        &pop_z,
        Some((&z_uc, &y_uc)),
        k_or_bins,
        stream_seed(cfg.master_seed, fit.repeat_id as u64, 4),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
        cfg.master_seed,
        fit.repeat_id as u64,
        5,
    ));
    ui_calibrate(
        &fit.data,
        &fit.splits,
        &|i, y| fit.score_at(i, y),
        &|i| fit.ghat[i],
        &sampler,
        cfg.alpha,
        &mut rng,
    )
}

/// Run every configured method on one fitted repeat.
pub fn run_repeat(cfg: &ExperimentConfig, fit: &FittedRepeat) -> Result<RepeatOutcome> {
    let mut thresholds = BTreeMap::new();
    let mut reports = Vec::new();
    let score_fn = |i: usize, y: f64| fit.score_at(i, y);

    let mut cached_ui: Option<CalibratedThreshold> = None;
    let mut cached_naive: Option<CalibratedThreshold> = None;
    let mut cached_pcp_true: Option<CalibratedThreshold> = None;
    let mut cached_pcp_est: Option<CalibratedThreshold> = None;

    let need = |m: Method| cfg.methods.contains(&m);
    let triply = need(Method::Triply);

    if need(Method::NaiveCp) || triply {
        cached_naive = Some(naive_cp(&fit.data, &fit.splits, &score_fn, cfg.alpha));
    }
    if need(Method::PcpTrue) || (triply && cfg.triply_pcp_weights == WeightSource::True) {
        let w = fit
            .weights_true
            .as_ref()
            .ok_or(Error::GeneratorRequired)?
            .clone();
        cached_pcp_true = Some(pcp_calibrate(
            &fit.data,
            &fit.splits,
            &score_fn,
            &|i| w[i],
            cfg.alpha,
            cfg.beta,
        )?);
    }
    if need(Method::PcpEst) || (triply && cfg.triply_pcp_weights == WeightSource::Est) {
        let w = fit
            .weights_est
            .as_ref()
            .expect("estimated weights fitted")
            .clone();
        cached_pcp_est = Some(pcp_calibrate(
            &fit.data,
            &fit.splits,
            &score_fn,
            &|i| w[i],
            cfg.alpha,
            cfg.beta,
        )?);
    }
    if need(Method::Ui) || triply {
        cached_ui = Some(ui_threshold(cfg, fit)?);
    }

    for method in &cfg.methods {
        match method {
            Method::NaiveCp => {
                let t = cached_naive.as_ref().unwrap();
                let (cov, len) = evaluate_scalar(fit, t.value);
                thresholds.insert(method.name().to_string(), t.value);
                reports.push(CoverageReport::from_outcomes(
                    method.name(),
                    fit.repeat_id,
                    &cov,
                    &len,
                ));
            }
            Method::NaiveImpute => {
                let t = naive_impute_calibrate(
                    &fit.data,
                    &fit.splits,
                    &score_fn,
                    &|i| fit.ghat[i],
                    cfg.alpha,
                );
                let (cov, len) = evaluate_scalar(fit, t.value);
                thresholds.insert(method.name().to_string(), t.value);
                reports.push(CoverageReport::from_outcomes(
                    method.name(),
                    fit.repeat_id,
                    &cov,
                    &len,
                ));
            }
            Method::PcpTrue => {
                let t = cached_pcp_true.as_ref().unwrap();
                let (cov, len) = evaluate_scalar(fit, t.value);
                thresholds.insert(method.name().to_string(), t.value);
                reports.push(CoverageReport::from_outcomes(
                    method.name(),
                    fit.repeat_id,
                    &cov,
                    &len,
                ));
            }
            Method::PcpEst => {
                let t = cached_pcp_est.as_ref().unwrap();
                let (cov, len) = evaluate_scalar(fit, t.value);
                thresholds.insert(method.name().to_string(), t.value);
                reports.push(CoverageReport::from_outcomes(
                    method.name(),
                    fit.repeat_id,
                    &cov,
                    &len,
                ));
            }
            Method::Ui => {
                let t = cached_ui.as_ref().unwrap();
                let (cov, len) = evaluate_scalar(fit, t.value);
                thresholds.insert(method.name().to_string(), t.value);
                reports.push(CoverageReport::from_outcomes(
                    method.name(),
                    fit.repeat_id,
                    &cov,
                    &len,
                ));
            }
            Method::WcpTrue => {
                let w = fit
                    .weights_true
                    .as_ref()
                    .ok_or(Error::GeneratorRequired)?;
                let cal = fit.splits.full_cal();
                let (uc_scores, uc_weights): (Vec<f64>, Vec<f64>) = cal
                    .iter()
                    .filter(|&&i| !fit.data.samples[i].corrupted)
                    .map(|&i| {
                        let y = fit.data.samples[i].observed_label.expect("label");
                        (fit.score_at(i, y), w[i])
                    })
                    .unzip();
                let engine = WeightedQuantileEngine::new(&uc_scores, &uc_weights);
                let scale = fit.transform.label_scale();
                let mut cov = Vec::new();
                let mut len = Vec::new();
                let mut t_sum = 0.0;
                for &t in &fit.splits.test {
                    let thr = engine.threshold(w[t], 1.0 - cfg.alpha);
                    let y = fit.data.samples[t].clean_label.expect("clean label");
                    cov.push(fit.score_at(t, y) <= thr);
                    len.push(invert(&fit.evals[t], thr).length() * scale);
                    t_sum += if thr.is_finite() { thr } else { 0.0 };
                }
                thresholds.insert(
                    method.name().to_string(),
                    t_sum / fit.splits.test.len() as f64,
                );
                reports.push(CoverageReport::from_outcomes(
                    method.name(),
                    fit.repeat_id,
                    &cov,
                    &len,
                ));
            }
            Method::Triply => {
                let t_naive = cached_naive.as_ref().unwrap().value;
                let t_pcp = match cfg.triply_pcp_weights {
                    WeightSource::True => cached_pcp_true.as_ref().unwrap().value,
                    WeightSource::Est => cached_pcp_est.as_ref().unwrap().value,
                };
                let t_ui = cached_ui.as_ref().unwrap().value;
                let t_max = t_naive.max(t_pcp).max(t_ui);
                let (cov, len) = evaluate_scalar(fit, t_max);
                // union dominance must hold pointwise: the shared score
                // function makes the union the max-threshold inversion
                for &t in fit.splits.test.iter().take(8) {
                    let sets = conformal_pi::calibrate::triply_robust(
                        &[fit.evals[t], fit.evals[t], fit.evals[t]],
                        &[
                            CalibratedThreshold {
                                value: t_naive,
                                method: "naive_cp".into(),
                                level: 1.0 - cfg.alpha,
                            },
                            CalibratedThreshold {
                                value: t_pcp,
                                method: "pcp".into(),
                                level: 1.0 - cfg.beta,
                            },
                            CalibratedThreshold {
                                value: t_ui,
                                method: "ui".into(),
                                level: 1.0 - cfg.alpha,
                            },
                        ],
                    );
                    let y = fit.data.samples[t].clean_label.expect("clean label");
                    debug_assert_eq!(sets.contains(y), fit.score_at(t, y) <= t_max);
                }
                thresholds.insert(method.name().to_string(), t_max);
                reports.push(CoverageReport::from_outcomes(
                    method.name(),
                    fit.repeat_id,
                    &cov,
                    &len,
                ));
            }
        }
    }

    Ok(RepeatOutcome {
        repeat_id: fit.repeat_id,
        thresholds,
        reports,
    })
}

#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub method: String,
    pub coverage_mean: f64,
    pub coverage_se: f64,
    pub length_mean: f64,
    pub length_se: f64,
    pub infinite_total: usize,
}

pub fn aggregate(reports: &[CoverageReport]) -> Vec<AggregateRow> {
    let mut methods: Vec<String> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    methods
        .iter()
        .map(|m| {
            let rows: Vec<&CoverageReport> =
                reports.iter().filter(|r| &r.method == m).collect();
            let covs: Vec<f64> = rows.iter().map(|r| r.coverage).collect();
            let lens: Vec<f64> = rows
                .iter()
                .map(|r| r.mean_length)
                .filter(|l| l.is_finite())
                .collect();
            let infinite_total = rows.iter().map(|r| r.n_infinite).sum();
            AggregateRow {
                method: m.clone(),
                coverage_mean: mean(&covs),
                coverage_se: standard_error(&covs),
                length_mean: if lens.is_empty() {
                    f64::INFINITY
                } else {
                    mean(&lens)
                },
                length_se: if lens.len() < 2 {
                    0.0
                } else {
                    standard_error(&lens)
                },
                infinite_total,
            }
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation over sqrt(count).
pub fn standard_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

pub struct ExperimentOutput {
    pub reports: Vec<CoverageReport>,
    pub aggregates: Vec<AggregateRow>,
    pub repeats: Vec<RepeatOutcome>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate().map_err(Error::Config)?;
    let prepared = load_source(&cfg.source)?;
    let need_true = cfg.methods.contains(&Method::WcpTrue)
        || cfg.methods.contains(&Method::PcpTrue)
        || (cfg.methods.contains(&Method::Triply)
            && cfg.triply_pcp_weights == WeightSource::True);
    let need_est = cfg.methods.contains(&Method::PcpEst)
        || (cfg.methods.contains(&Method::Triply)
            && cfg.triply_pcp_weights == WeightSource::Est);

    let outcomes: Result<Vec<RepeatOutcome>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let fit = fit_repeat(cfg, &prepared, r, need_true, need_est)?;
            run_repeat(cfg, &fit)
        })
        .collect();
    let repeats = outcomes?;
    let reports: Vec<CoverageReport> = repeats
        .iter()
        .flat_map(|r| r.reports.iter().cloned())
        .collect();
    let aggregates = aggregate(&reports);
    Ok(ExperimentOutput {
        reports,
        aggregates,
        repeats,
    })
}

/// Write per-repeat metrics in the exchange format.
pub fn write_metrics_csv<P: AsRef<std::path::Path>>(
    path: P,
    reports: &[CoverageReport],
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "method,repeat,coverage,mean_length,n_infinite")?;
    for r in reports {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{}",
            r.method, r.repeat_id, r.coverage, r.mean_length, r.n_infinite
        )?;
    }
    Ok(())
}

pub fn write_aggregate_csv<P: AsRef<std::path::Path>>(
    path: P,
    rows: &[AggregateRow],
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "method,coverage_mean,coverage_se,length_mean,length_se,n_infinite_total"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            r.method, r.coverage_mean, r.coverage_se, r.length_mean, r.length_se, r.infinite_total
        )?;
    }
    Ok(())
}
