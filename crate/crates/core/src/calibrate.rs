//! Calibration schemes: plain conformal calibration on uncorrupted data,
//! weighted calibration, privileged calibration (per-sample weighted
//! thresholds aggregated at level 1 - beta), naive imputation, uncertain
//! imputation, and the triply robust union.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PredictionSet, SplitIndices};
use crate::error::{Error, Result};
use crate::models::{KMeansModel, LinearModel};
use crate::scores::{invert, ModelEval};
use crate::synth::quantile;

/// Threshold produced by a calibration scheme; `f64::INFINITY` encodes
/// the infinite atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedThreshold {
    pub value: f64,
    pub method: String,
    pub level: f64,
}

/// Rank of the conformal order statistic: ceil(count * level), guarded
/// against floating noise on exact integers.
pub fn conformal_rank(count: usize, level: f64) -> usize {
    let raw = count as f64 * level;
    let k = (raw - 1e-9).ceil() as isize;
    k.max(1) as usize
}

/// Plain split-conformal threshold: the ceil((n+1)(1-alpha))-th smallest
/// score, infinite when the rank exceeds n.
pub fn cp_threshold(scores: &[f64], alpha: f64) -> CalibratedThreshold {
    let n = scores.len();
    let k = conformal_rank(n + 1, 1.0 - alpha);
    let value = if n == 0 || k > n {
        f64::INFINITY
    } else {
        let mut sorted = scores.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        sorted[k - 1]
    };
    CalibratedThreshold {
        value,
        method: "cp".into(),
        level: 1.0 - alpha,
    }
}

/// Scores with aligned weights plus the test-side weight, the input of
/// every weighted quantile.
#[derive(Debug, Clone)]
pub struct ScoreProfile {
    scores: Vec<f64>,
    weights: Vec<f64>,
    test_weight: f64,
    order: Vec<usize>,
}

impl ScoreProfile {
    pub fn new(scores: Vec<f64>, weights: Vec<f64>, test_weight: f64) -> Result<Self> {
        if scores.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: scores.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|&w| w <= 0.0) || test_weight <= 0.0 {
            return Err(Error::NonPositiveWeight);
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        Ok(Self {
            scores,
            weights,
            test_weight,
            order,
        })
    }

    pub fn sorted_scores(&self) -> Vec<f64> {
        self.order.iter().map(|&i| self.scores[i]).collect()
    }

    pub fn sorted_weights(&self) -> Vec<f64> {
        self.order.iter().map(|&i| self.weights[i]).collect()
    }

    pub fn test_weight(&self) -> f64 {
        self.test_weight
    }
}

/// Quantile of the weighted score distribution with an infinite atom of
/// mass `test_weight`: walk the scores ascending, pooling equal scores,
/// and return the first score whose cumulative normalized mass reaches
/// the level; infinite when the finite mass never does.
pub fn weighted_threshold(profile: &ScoreProfile, level: f64) -> Result<CalibratedThreshold> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::BadLevel { level });
    }
    let engine = WeightedQuantileEngine::new(&profile.scores, &profile.weights);
    Ok(CalibratedThreshold {
        value: engine.threshold(profile.test_weight, level),
        method: "wcp".into(),
        level,
    })
}

/// Shared walk over score-sorted weights supporting repeated queries with
/// different test-side weights. Weights may be signed (used by the
/// weight-error analyses and the delta sweeps); the production entry
/// points validate positivity before building one of these.
#[derive(Debug, Clone)]
pub struct WeightedQuantileEngine {
    group_scores: Vec<f64>,
    prefix: Vec<f64>,
    prefix_running_max: Vec<f64>,
    prefix_running_min: Vec<f64>,
    total: f64,
}

impl WeightedQuantileEngine {
    pub fn new(scores: &[f64], weights: &[f64]) -> Self {
        debug_assert_eq!(scores.len(), weights.len());
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        let mut group_scores = Vec::new();
        let mut prefix = Vec::new();
        let mut cum = 0.0;
        let mut i = 0;
        while i < order.len() {
            let s = scores[order[i]];
            // equal scores accumulate jointly before any comparison
            while i < order.len() && scores[order[i]] == s {
                cum += weights[order[i]];
                i += 1;
            }
            group_scores.push(s);
            prefix.push(cum);
        }
        let mut prefix_running_max = prefix.clone();
        let mut prefix_running_min = prefix.clone();
        for j in 1..prefix.len() {
            prefix_running_max[j] = prefix_running_max[j].max(prefix_running_max[j - 1]);
            prefix_running_min[j] = prefix_running_min[j].min(prefix_running_min[j - 1]);
        }
        Self {
            group_scores,
            prefix,
            prefix_running_max,
            prefix_running_min,
            total: cum,
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.total
    }

    fn crossing_group(&self, test_weight: f64, level: f64) -> Option<usize> {
        let denom = self.total + test_weight;
        if denom == 0.0 {
            return None;
        }
        let cutoff = level * denom;
        // tolerance keeps exact-tie masses (uniform weights) consistent
        // with the order-statistic rank convention
        let eps = 1e-9 * denom.abs();
        let idx = if denom > 0.0 {
            self.prefix_running_max.partition_point(|&m| m < cutoff - eps)
        } else {
            self.prefix_running_min.partition_point(|&m| m > cutoff + eps)
        };
        Some(idx)
    }

    /// First score whose cumulative normalized mass reaches `level`,
    /// where the normalizer is `total + test_weight` (the infinite atom
    /// carries `test_weight`). Infinite when never reached.
    pub fn threshold(&self, test_weight: f64, level: f64) -> f64 {
        match self.crossing_group(test_weight, level) {
            Some(idx) if idx < self.group_scores.len() => self.group_scores[idx],
            _ => f64::INFINITY,
        }
    }

    /// Walk index in 1..=n+1 terms: n+1 denotes the infinite atom.
    pub fn threshold_index(&self, test_weight: f64, level: f64) -> usize {
        match self.crossing_group(test_weight, level) {
            Some(idx) => idx + 1,
            None => self.prefix.len() + 1,
        }
    }
}

fn uncorrupted_cal_scores(
    dataset: &Dataset,
    cal: &[usize],
    score_fn: &dyn Fn(usize, f64) -> f64,
) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::new();
    let mut scores = Vec::new();
    for &i in cal {
        let s = &dataset.samples[i];
        if !s.corrupted {
            let y = s
                .observed_label
                .expect("uncorrupted sample carries an observed label");
            idx.push(i);
            scores.push(score_fn(i, y));
        }
    }
    (idx, scores)
}

/// Plain conformal calibration restricted to the uncorrupted calibration
/// samples.
pub fn naive_cp(
    dataset: &Dataset,
    splits: &SplitIndices,
    score_fn: &dyn Fn(usize, f64) -> f64,
    alpha: f64,
) -> CalibratedThreshold {
    let (_, scores) = uncorrupted_cal_scores(dataset, &splits.full_cal(), score_fn);
    let mut t = cp_threshold(&scores, alpha);
    t.method = "naive_cp".into();
    t
}

/// Weighted conformal calibration over the uncorrupted calibration
/// scores, with caller-supplied per-sample weights and test weight.
pub fn wcp_threshold(
    dataset: &Dataset,
    splits: &SplitIndices,
    score_fn: &dyn Fn(usize, f64) -> f64,
    weight_of: &dyn Fn(usize) -> f64,
    test_weight: f64,
    alpha: f64,
) -> Result<CalibratedThreshold> {
    let (idx, scores) = uncorrupted_cal_scores(dataset, &splits.full_cal(), score_fn);
    let weights: Vec<f64> = idx.iter().map(|&i| weight_of(i)).collect();
    let profile = ScoreProfile::new(scores, weights, test_weight)?;
    weighted_threshold(&profile, 1.0 - alpha)
}

fn pcp_impl(
    dataset: &Dataset,
    splits: &SplitIndices,
    score_fn: &dyn Fn(usize, f64) -> f64,
    weight_of: &dyn Fn(usize) -> f64,
    alpha: f64,
    beta: f64,
    require_positive: bool,
) -> Result<CalibratedThreshold> {
    if !(0.0 < beta && beta < alpha) {
        return Err(Error::BadBeta { alpha, beta });
    }
    let cal = splits.full_cal();
    let (uc_idx, uc_scores) = uncorrupted_cal_scores(dataset, &cal, score_fn);
    let uc_weights: Vec<f64> = uc_idx.iter().map(|&i| weight_of(i)).collect();
    if require_positive && uc_weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::NonPositiveWeight);
    }
    let engine = WeightedQuantileEngine::new(&uc_scores, &uc_weights);
    let level = 1.0 - alpha + beta;

    // every calibration sample, corrupted or not, contributes one
    // per-sample threshold with its own weight on the infinite atom
    let mut per_sample: Vec<f64> = cal
        .iter()
        .map(|&i| {
            let w = weight_of(i);
            if require_positive && w <= 0.0 {
                return f64::NAN;
            }
            engine.threshold(w, level)
        })
        .collect();
    if per_sample.iter().any(|v| v.is_nan()) {
        return Err(Error::NonPositiveWeight);
    }

    let m = per_sample.len();
    let k = conformal_rank(m + 1, 1.0 - beta);
    let value = if k > m {
        f64::INFINITY
    } else {
        per_sample.sort_unstable_by(f64::total_cmp);
        per_sample[k - 1]
    };
    Ok(CalibratedThreshold {
        value,
        method: "pcp".into(),
        level: 1.0 - beta,
    })
}

/// Privileged conformal calibration: a weighted threshold at level
/// 1 - alpha + beta per calibration sample, then the (1 - beta) quantile
/// of those thresholds with an infinite atom.
pub fn pcp_calibrate(
    dataset: &Dataset,
    splits: &SplitIndices,
    score_fn: &dyn Fn(usize, f64) -> f64,
    weight_of: &dyn Fn(usize) -> f64,
    alpha: f64,
    beta: f64,
) -> Result<CalibratedThreshold> {
    pcp_impl(dataset, splits, score_fn, weight_of, alpha, beta, true)
}

/// Privileged calibration admitting signed weights, for studies that
/// inject additive weight errors large enough to flip signs.
pub fn pcp_calibrate_signed(
    dataset: &Dataset,
    splits: &SplitIndices,
    score_fn: &dyn Fn(usize, f64) -> f64,
    weight_of: &dyn Fn(usize) -> f64,
    alpha: f64,
    beta: f64,
) -> Result<CalibratedThreshold> {
    pcp_impl(dataset, splits, score_fn, weight_of, alpha, beta, false)
}

/// Conformal calibration after replacing corrupted calibration labels by
/// a point imputation.
pub fn naive_impute_calibrate(
    dataset: &Dataset,
    splits: &SplitIndices,
    score_fn: &dyn Fn(usize, f64) -> f64,
    imputed_label_of: &dyn Fn(usize) -> f64,
    alpha: f64,
) -> CalibratedThreshold {
    let cal = splits.full_cal();
    let scores: Vec<f64> = cal
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let y = if s.corrupted {
                imputed_label_of(i)
            } else {
                s.observed_label.expect("uncorrupted label present")
            };
            score_fn(i, y)
        })
        .collect();
    let mut t = cp_threshold(&scores, alpha);
    t.method = "naive_impute".into();
    t
}

/// Which reference errors a query PI routes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    ExactZ,
    KMeans,
    LinearBin,
    Marginal,
}

#[derive(Debug, Clone)]
enum Router {
    Marginal,
    KMeans {
        model: KMeansModel,
        pool_of_cluster: Vec<usize>,
    },
    LinearBin {
        model: LinearModel,
        edges: Vec<f64>,
        pool_of_bin: Vec<usize>,
    },
    ExactZ(BTreeMap<Vec<u64>, usize>),
}

/// Pools of holdout residual errors conditioned on the privileged
/// information; draws are uniform over the routed pool.
#[derive(Debug, Clone)]
pub struct ErrorSampler {
    router: Router,
    pools: Vec<Vec<f64>>,
}

fn z_key(z: &[f64]) -> Vec<u64> {
    z.iter().map(|v| v.to_bits()).collect()
}

/// Reassign empty pools to the nearest non-empty one; `distance`
/// measures cluster-to-cluster proximity.
fn merge_empty_pools(
    raw: Vec<Vec<f64>>,
    distance: impl Fn(usize, usize) -> f64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let non_empty: Vec<usize> = (0..raw.len()).filter(|&i| !raw[i].is_empty()).collect();
    if non_empty.is_empty() {
        return Err(Error::EmptyErrorPool);
    }
    let mapping: Vec<usize> = (0..raw.len())
        .map(|i| {
            if !raw[i].is_empty() {
                i
            } else {
                *non_empty
                    .iter()
                    .min_by(|&&a, &&b| distance(i, a).total_cmp(&distance(i, b)))
                    .unwrap()
            }
        })
        .collect();
    Ok((raw, mapping))
}

/// Build the error pools. Reference errors arrive as (z, error) pairs.
/// The k-means router and the linear router's equal-count bin edges are
/// fitted on `population_z` (the train+val PI rows), so routing reflects
/// the population PI distribution rather than the corruption-thinned
/// reference one; the linear model itself is fitted on the labeled pairs.
pub fn build_error_sampler(
    kind: SamplerKind,
    ref_errors: &[(Vec<f64>, f64)],
    population_z: &[Vec<f64>],
    labeled: Option<(&[Vec<f64>], &[f64])>,
    k_or_bins: usize,
    seed: u64,
) -> Result<ErrorSampler> {
    if ref_errors.is_empty() {
        return Err(Error::NoReferenceErrors);
    }
    match kind {
        SamplerKind::Marginal => Ok(ErrorSampler {
            router: Router::Marginal,
            pools: vec![ref_errors.iter().map(|(_, e)| *e).collect()],
        }),
        SamplerKind::ExactZ => {
            let mut map: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
            let mut pools: Vec<Vec<f64>> = Vec::new();
            for (z, e) in ref_errors {
                let key = z_key(z);
                let idx = *map.entry(key).or_insert_with(|| {
                    pools.push(Vec::new());
                    pools.len() - 1
                });
                pools[idx].push(*e);
            }
            Ok(ErrorSampler {
                router: Router::ExactZ(map),
                pools,
            })
        }
        SamplerKind::KMeans => {
            let model = crate::models::fit_kmeans(population_z, k_or_bins, seed)?;
            let mut raw = vec![Vec::new(); k_or_bins];
            for (z, e) in ref_errors {
                raw[model.assign(z)].push(*e);
            }
            let centroids = model.centroids.clone();
            let (pools, pool_of_cluster) = merge_empty_pools(raw, |a, b| {
                centroids[a]
                    .iter()
                    .zip(&centroids[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })?;
            Ok(ErrorSampler {
                router: Router::KMeans {
                    model,
                    pool_of_cluster,
                },
                pools,
            })
        }
        SamplerKind::LinearBin => {
            let (fit_z, fit_y) = labeled.ok_or(Error::MissingTarget)?;
            let model = crate::models::fit_least_squares(fit_z, fit_y)?;
            let preds: Vec<f64> = population_z.iter().map(|z| model.predict(z)).collect();
            let edges: Vec<f64> = (1..k_or_bins)
                .map(|j| quantile(&preds, j as f64 / k_or_bins as f64))
                .collect();
            let bin_of = |pred: f64| edges.partition_point(|&e| e <= pred);
            let mut raw = vec![Vec::new(); k_or_bins];
            for (z, e) in ref_errors {
                raw[bin_of(model.predict(z))].push(*e);
            }
            let (pools, pool_of_bin) = merge_empty_pools(raw, |a, b| {
                (a as f64 - b as f64).abs()
            })?;
            Ok(ErrorSampler {
                router: Router::LinearBin {
                    model,
                    edges,
                    pool_of_bin,
                },
                pools,
            })
        }
    }
}

impl ErrorSampler {
    /// Uniform draw from the pool the query PI routes to.
    pub fn draw<R: Rng>(&self, z: &[f64], rng: &mut R) -> Result<f64> {
        let pool = match &self.router {
            Router::Marginal => &self.pools[0],
            Router::KMeans {
                model,
                pool_of_cluster,
            } => &self.pools[pool_of_cluster[model.assign(z)]],
            Router::LinearBin {
                model,
                edges,
                pool_of_bin,
            } => {
                let pred = model.predict(z);
                let bin = edges.partition_point(|&e| e <= pred);
                &self.pools[pool_of_bin[bin]]
            }
            Router::ExactZ(map) => {
                let idx = map.get(&z_key(z)).ok_or(Error::EmptyErrorPool)?;
                &self.pools[*idx]
            }
        };
        if pool.is_empty() {
            return Err(Error::EmptyErrorPool);
        }
        Ok(pool[rng.random_range(0..pool.len())])
    }

    pub fn pool_sizes(&self) -> Vec<usize> {
        self.pools.iter().map(Vec::len).collect()
    }
}

/// Uncertain-imputation calibration: corrupted calibration labels become
/// the regression prediction plus a routed reference error; the
/// threshold is plain conformal over the imputed scores.
pub fn ui_calibrate<R: Rng>(
    dataset: &Dataset,
    splits: &SplitIndices,
    score_fn: &dyn Fn(usize, f64) -> f64,
    g_hat_of: &dyn Fn(usize) -> f64,
    sampler: &ErrorSampler,
    alpha: f64,
    rng: &mut R,
) -> Result<CalibratedThreshold> {
    let mut scores = Vec::with_capacity(splits.cal.len());
    for &i in &splits.cal {
        let s = &dataset.samples[i];
        let y = if s.corrupted {
            g_hat_of(i) + sampler.draw(&s.privileged, rng)?
        } else {
            s.observed_label.expect("uncorrupted label present")
        };
        scores.push(score_fn(i, y));
    }
    let mut t = cp_threshold(&scores, alpha);
    t.method = "ui".into();
    Ok(t)
}

/// Residual errors of the regression model on the uncorrupted reference
/// samples, paired with their PI.
pub fn reference_errors(
    dataset: &Dataset,
    splits: &SplitIndices,
    g_hat_of: &dyn Fn(usize) -> f64,
) -> Vec<(Vec<f64>, f64)> {
    splits
        .reference
        .iter()
        .filter_map(|&i| {
            let s = &dataset.samples[i];
            if s.corrupted {
                None
            } else {
                let y = s.observed_label.expect("uncorrupted label present");
                Some((s.privileged.clone(), y - g_hat_of(i)))
            }
        })
        .collect()
}

/// Union of the three component prediction sets at one test input. When
/// all components share a single score model, the union equals inversion
/// at the maximum threshold.
pub fn triply_robust(
    evals: &[ModelEval; 3],
    thresholds: &[CalibratedThreshold; 3],
) -> PredictionSet {
    let sets: Vec<PredictionSet> = evals
        .iter()
        .zip(thresholds)
        .map(|(e, t)| invert(e, t.value).with_provenance(&t.method, t.value))
        .collect();
    let union = crate::data::set_union(&sets);
    if evals[1] == evals[0] && evals[2] == evals[0] {
        let max_t = thresholds
            .iter()
            .map(|t| t.value)
            .fold(f64::NEG_INFINITY, f64::max);
        debug_assert_eq!(union.intervals, invert(&evals[0], max_t).intervals);
    }
    union
}
