//! Nonconformity scores and their exact inversion into prediction sets.

use serde::{Deserialize, Serialize};

use crate::data::{Interval, PredictionSet};

/// A fitted predictor evaluated at one input: either a mean estimate
/// (absolute-residual score) or a lower/upper quantile pair (CQR score).
/// Quantile crossing is allowed; inversion handles it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModelEval {
    Mean(f64),
    Quantiles { lo: f64, hi: f64 },
}

/// Absolute residual `|f(x) - y|` or CQR `max(q_lo - y, y - q_hi)`.
pub fn score(eval: &ModelEval, y: f64) -> f64 {
    match *eval {
        ModelEval::Mean(f) => (f - y).abs(),
        ModelEval::Quantiles { lo, hi } => (lo - y).max(y - hi),
    }
}

/// Exact set `{y : score(x, y) <= threshold}`.
pub fn invert(eval: &ModelEval, threshold: f64) -> PredictionSet {
    if threshold == f64::INFINITY {
        return PredictionSet::full_line();
    }
    let (lo, hi) = match *eval {
        ModelEval::Mean(f) => (f - threshold, f + threshold),
        ModelEval::Quantiles { lo, hi } => (lo - threshold, hi + threshold),
    };
    if lo > hi {
        PredictionSet::empty()
    } else {
        PredictionSet::from_intervals(vec![Interval { lo, hi }])
    }
}
