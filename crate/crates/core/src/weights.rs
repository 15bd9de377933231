//! Exact validity predicates for weighted calibration under inaccurate
//! weights: the constant-error and general bounded-error conditions,
//! region sweeps over the error bounds, and the theoretical boundary
//! curves overlaid on those regions.
//!
//! Convention: weights are ordered so their scores ascend, with the test
//! weight last (its score atom sits at infinity). The comparison both
//! predicates characterize is the perturbed cumulative mass at the true
//! threshold index against the true cumulative mass there; the case
//! split is driven by the sign of `k * W_{n+1} - (n+1) * W_k`, the
//! quantity the derivations manipulate when they compare the unweighted
//! and weighted thresholds.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// True weights for the n calibration samples plus the test weight,
/// score-ascending with the test entry last.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightErrorProfile {
    weights: Vec<f64>,
}

impl WeightErrorProfile {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::TooFewRows);
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::NonPositiveWeight);
        }
        Ok(Self { weights })
    }

    /// Number of calibration samples (excludes the test weight).
    pub fn n(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// W_k = sum of the first k weights, k in 1..=n+1.
    pub fn partial_sum(&self, k: usize) -> f64 {
        self.weights[..k].iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.partial_sum(self.weights.len())
    }
}

/// Per-sample additive errors bounded by [delta_min, delta_max], one per
/// weight including the test entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralErrors {
    pub deltas: Vec<f64>,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl GeneralErrors {
    pub fn new(deltas: Vec<f64>, delta_min: f64, delta_max: f64) -> Result<Self> {
        if delta_min >= delta_max {
            return Err(Error::BadErrorBounds {
                delta_min,
                delta_max,
            });
        }
        if deltas
            .iter()
            .any(|&d| d < delta_min - 1e-12 || d > delta_max + 1e-12)
        {
            return Err(Error::BadErrorBounds {
                delta_min,
                delta_max,
            });
        }
        Ok(Self {
            deltas,
            delta_min,
            delta_max,
        })
    }

    /// Normalized errors in [0, 1].
    pub fn normalized(&self) -> Vec<f64> {
        let span = self.delta_max - self.delta_min;
        self.deltas
            .iter()
            .map(|&d| (d - self.delta_min) / span)
            .collect()
    }

    /// delta_min / (delta_max - delta_min).
    pub fn delta_bar(&self) -> f64 {
        self.delta_min / (self.delta_max - self.delta_min)
    }
}

/// Index selected by unweighted calibration: min{k : k/(n+1) >= 1-alpha},
/// equal to n+1 when the finite atoms never reach the level.
pub fn k_cp(n: usize, alpha: f64) -> usize {
    let raw = (n as f64 + 1.0) * (1.0 - alpha);
    let k = (raw - 1e-9).ceil() as usize;
    k.clamp(1, n + 1)
}

/// Index selected by true-weighted calibration:
/// min{k : W_k / W_{n+1} >= 1-alpha}, or n+1 at the infinite atom.
pub fn k_wcp(profile: &WeightErrorProfile, alpha: f64) -> usize {
    let total = profile.total();
    let cutoff = (1.0 - alpha) * total - 1e-9 * total;
    let mut cum = 0.0;
    for (i, &w) in profile.weights().iter().enumerate() {
        cum += w;
        if cum >= cutoff {
            return i + 1;
        }
    }
    profile.weights().len()
}

/// Which derivation branch fired, named by the threshold comparison the
/// proofs attach to the sign of `k * W_{n+1} - (n+1) * W_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictCase {
    /// Unweighted threshold above the weighted one (mass at the pivotal
    /// index below uniform).
    QcpAboveQwcp,
    /// Unweighted threshold below the weighted one.
    QcpBelowQwcp,
    /// Exact mass equality at the pivotal index.
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    /// Perturbed threshold at or above the true weighted threshold.
    pub q_hat_ge_q_wcp: bool,
    /// Perturbed threshold at or above the unweighted threshold.
    pub q_hat_ge_q_cp: bool,
    pub case_wcp: VerdictCase,
    pub case_cp: VerdictCase,
}

fn pivot_sign(k: usize, w_k: f64, n: usize, w_total: f64) -> f64 {
    k as f64 * w_total - (n as f64 + 1.0) * w_k
}

fn case_of(sign: f64) -> VerdictCase {
    if sign > 0.0 {
        VerdictCase::QcpBelowQwcp
    } else if sign < 0.0 {
        VerdictCase::QcpAboveQwcp
    } else {
        VerdictCase::Boundary
    }
}

/// Constant-error validity conditions. The singular shift
/// `delta = -W_{n+1}/(n+1)` zeroes the perturbed normalizer and is
/// rejected.
pub fn constant_delta_verdict(
    profile: &WeightErrorProfile,
    alpha: f64,
    delta: f64,
) -> Result<ValidityVerdict> {
    let n = profile.n();
    let total = profile.total();
    let singular = -total / (n as f64 + 1.0);
    if delta == singular {
        return Err(Error::SingularNormalization);
    }
    let denom_positive = delta > singular;

    let kw = k_wcp(profile, alpha);
    let s_wcp = pivot_sign(kw, profile.partial_sum(kw), n, total);
    let q_hat_ge_q_wcp = match case_of(s_wcp) {
        // mass below uniform at the pivot: valid for nonnegative shifts
        // or shifts past the singularity
        VerdictCase::QcpAboveQwcp => delta >= 0.0 || !denom_positive,
        // mass above uniform: only small negative shifts keep validity
        VerdictCase::QcpBelowQwcp => denom_positive && delta <= 0.0,
        VerdictCase::Boundary => true,
    };

    let kc = k_cp(n, alpha);
    let s_cp = pivot_sign(kc, profile.partial_sum(kc), n, total);
    let q_hat_ge_q_cp = match case_of(s_cp) {
        // true mass below uniform at k_cp (weighted threshold higher):
        // dominating the unweighted one needs the sign flip
        VerdictCase::QcpAboveQwcp => !denom_positive,
        VerdictCase::QcpBelowQwcp => denom_positive,
        VerdictCase::Boundary => true,
    };

    Ok(ValidityVerdict {
        q_hat_ge_q_wcp,
        q_hat_ge_q_cp,
        case_wcp: case_of(s_wcp),
        case_cp: case_of(s_cp),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequirementReport {
    /// Requirement on delta_bar; `None` when its denominator vanishes
    /// (the boundary case delegates to requirement 3).
    pub req1: Option<bool>,
    /// Positivity of the perturbed total mass.
    pub req2: bool,
    /// Partial-error-share condition; vacuously true when all normalized
    /// errors are zero.
    pub req3: bool,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n: usize,
    pub k_cp: usize,
    pub k_wcp: usize,
    /// Weight partial sums W_1 ..= W_{n+1}.
    pub weight_partials: Vec<f64>,
    /// Normalized-error partial sums through every index.
    pub delta_tilde_partials: Vec<f64>,
    pub delta_bar: f64,
    /// Sign carrier `k_wcp * W_{n+1} - (n+1) * W_{k_wcp}`.
    pub pivot: f64,
    /// Right-hand side of requirement 1 when defined.
    pub req1_rhs: Option<f64>,
}

impl Diagnostics {
    pub fn w_k_wcp(&self) -> f64 {
        self.weight_partials[self.k_wcp - 1]
    }

    pub fn w_total(&self) -> f64 {
        *self.weight_partials.last().unwrap()
    }

    pub fn delta_tilde_k_wcp(&self) -> f64 {
        self.delta_tilde_partials[self.k_wcp - 1]
    }

    pub fn delta_tilde_total(&self) -> f64 {
        *self.delta_tilde_partials.last().unwrap()
    }
}

/// Evaluate the three bounded-error requirements on a profile.
pub fn general_error_requirements(
    profile: &WeightErrorProfile,
    errors: &GeneralErrors,
    alpha: f64,
) -> Result<RequirementReport> {
    let n = profile.n();
    if errors.deltas.len() != n + 1 {
        return Err(Error::DimensionMismatch {
            expected: n + 1,
            got: errors.deltas.len(),
        });
    }
    let kw = k_wcp(profile, alpha);
    if kw > n {
        return Err(Error::ThresholdAtInfinity);
    }
    let w_total = profile.total();
    let w_k = profile.partial_sum(kw);
    let tilde = errors.normalized();
    let dt_total: f64 = tilde.iter().sum();
    let dt_k: f64 = tilde[..kw].iter().sum();
    let dbar = errors.delta_bar();

    let pivot = pivot_sign(kw, w_k, n, w_total);
    let req1_numerator = dt_total * w_k - dt_k * w_total;
    let (req1, req1_rhs) = if pivot == 0.0 {
        (None, None)
    } else {
        let rhs = req1_numerator / pivot;
        (Some(dbar <= rhs), Some(rhs))
    };
    let req2 = errors.delta_min
        > -(errors.delta_max * dt_total + w_total) / (n as f64 + 1.0 - dt_total);
    let req3 = if dt_total == 0.0 {
        true
    } else {
        dt_k / dt_total <= w_k / w_total
    };

    let mut weight_partials = Vec::with_capacity(n + 1);
    let mut delta_tilde_partials = Vec::with_capacity(n + 1);
    let mut wc = 0.0;
    let mut dc = 0.0;
    for (&w, &t) in profile.weights().iter().zip(&tilde) {
        wc += w;
        dc += t;
        weight_partials.push(wc);
        delta_tilde_partials.push(dc);
    }

    Ok(RequirementReport {
        req1,
        req2,
        req3,
        diagnostics: Diagnostics {
            n,
            k_cp: k_cp(n, alpha),
            k_wcp: kw,
            weight_partials,
            delta_tilde_partials,
            delta_bar: dbar,
            pivot,
            req1_rhs,
        },
    })
}

/// Bounded-error validity verdict: requirement 1 NXOR requirement 2 when
/// the pivotal mass sits above uniform, XOR when below, and the
/// requirement-3 comparison on the boundary.
pub fn general_error_verdict(
    profile: &WeightErrorProfile,
    errors: &GeneralErrors,
    alpha: f64,
) -> Result<ValidityVerdict> {
    let report = general_error_requirements(profile, errors, alpha)?;
    let d = report.diagnostics;
    let case_wcp = case_of(d.pivot);
    let q_hat_ge_q_wcp = match (case_wcp, report.req1) {
        (VerdictCase::QcpBelowQwcp, Some(r1)) => r1 == report.req2,
        (VerdictCase::QcpAboveQwcp, Some(r1)) => r1 != report.req2,
        _ => report.req2 == report.req3,
    };

    // unweighted comparison at k_cp, derived the same way
    let n = d.n;
    let kc = d.k_cp;
    let tilde = errors.normalized();
    let span = errors.delta_max - errors.delta_min;
    let dt_total: f64 = tilde.iter().sum();
    let dt_kc: f64 = tilde[..kc.min(n + 1)].iter().sum();
    let w_kc = profile.partial_sum(kc.min(n + 1));
    let t_cp = pivot_sign(kc, w_kc, n, profile.total());
    let lhs = span * ((n as f64 + 1.0) * dt_kc - kc as f64 * dt_total);
    let q_hat_ge_q_cp = if report.req2 { lhs <= t_cp } else { lhs >= t_cp };

    Ok(ValidityVerdict {
        q_hat_ge_q_wcp,
        q_hat_ge_q_cp,
        case_wcp,
        case_cp: case_of(t_cp),
    })
}

/// Direct signed-mass comparison at the true threshold index: the oracle
/// both verdicts are tested against. Computes the perturbed cumulative
/// mass at k_wcp by explicit summation and compares it with the true
/// cumulative mass there.
pub fn signed_mass_compare_wcp(
    profile: &WeightErrorProfile,
    deltas: &[f64],
    alpha: f64,
) -> Result<bool> {
    let n = profile.n();
    if deltas.len() != n + 1 {
        return Err(Error::DimensionMismatch {
            expected: n + 1,
            got: deltas.len(),
        });
    }
    let kw = k_wcp(profile, alpha);
    let w_total = profile.total();
    let d_total: f64 = deltas.iter().sum();
    let denom = w_total + d_total;
    if denom == 0.0 {
        return Err(Error::SingularNormalization);
    }
    let w_k = profile.partial_sum(kw);
    let d_k: f64 = deltas[..kw].iter().sum();
    let perturbed = (w_k + d_k) / denom;
    let truth = w_k / w_total;
    Ok(perturbed <= truth)
}

/// Same oracle against the unweighted threshold index.
pub fn signed_mass_compare_cp(
    profile: &WeightErrorProfile,
    deltas: &[f64],
    alpha: f64,
) -> Result<bool> {
    let n = profile.n();
    if deltas.len() != n + 1 {
        return Err(Error::DimensionMismatch {
            expected: n + 1,
            got: deltas.len(),
        });
    }
    let kc = k_cp(n, alpha).min(n + 1);
    let w_total = profile.total();
    let d_total: f64 = deltas.iter().sum();
    let denom = w_total + d_total;
    if denom == 0.0 {
        return Err(Error::SingularNormalization);
    }
    let w_k = profile.partial_sum(kc);
    let d_k: f64 = deltas[..kc].iter().sum();
    let perturbed = (w_k + d_k) / denom;
    let truth = kc as f64 / (n as f64 + 1.0);
    Ok(perturbed <= truth)
}

/// Min-index cumulative walk over signed masses (scores ascending, test
/// atom last). Returns the 1-based index where the normalized cumulative
/// mass first reaches `level`; n+1 denotes the infinite atom.
pub fn signed_walk_index(weights_with_test: &[f64], level: f64) -> usize {
    let total: f64 = weights_with_test.iter().sum();
    if total == 0.0 {
        return weights_with_test.len();
    }
    let n = weights_with_test.len() - 1;
    let cutoff = level * total;
    let eps = 1e-9 * total.abs();
    let mut cum = 0.0;
    for (i, &w) in weights_with_test[..n].iter().enumerate() {
        cum += w;
        let reached = if total > 0.0 {
            cum >= cutoff - eps
        } else {
            cum <= cutoff + eps
        };
        if reached {
            return i + 1;
        }
    }
    n + 1
}

/// Named shapes for the normalized error distribution on [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorShape {
    Uniform,
    /// 95% of the mass in the top 5% of the range.
    RightSkewed,
    /// 95% of the mass in the bottom 5% of the range.
    LeftSkewed,
    /// Bell centered at 1/2 (Beta(8, 8)).
    SmallTails,
    /// Mass piled at both ends (Beta(0.15, 0.15)).
    ExtremeTails,
    Beta { a: f64, b: f64 },
}

impl ErrorShape {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "uniform" => Ok(Self::Uniform),
            "right_skewed" => Ok(Self::RightSkewed),
            "left_skewed" => Ok(Self::LeftSkewed),
            "small_tails" => Ok(Self::SmallTails),
            "extreme_tails" => Ok(Self::ExtremeTails),
            other => Err(Error::UnknownDistribution {
                name: other.to_string(),
            }),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            ErrorShape::Uniform => rng.random::<f64>(),
            ErrorShape::RightSkewed => {
                if rng.random::<f64>() < 0.95 {
                    rng.random_range(0.95..1.0)
                } else {
                    rng.random_range(0.0..0.95)
                }
            }
            ErrorShape::LeftSkewed => {
                if rng.random::<f64>() < 0.95 {
                    rng.random_range(0.0..0.05)
                } else {
                    rng.random_range(0.05..1.0)
                }
            }
            ErrorShape::SmallTails => Beta::new(8.0, 8.0).unwrap().sample(rng),
            ErrorShape::ExtremeTails => Beta::new(0.15, 0.15).unwrap().sample(rng),
            ErrorShape::Beta { a, b } => Beta::new(a, b).unwrap().sample(rng),
        }
    }

    /// Mean of the shape; drives the deterministic boundary overlay.
    pub fn mean(&self) -> f64 {
        match *self {
            ErrorShape::Uniform | ErrorShape::SmallTails | ErrorShape::ExtremeTails => 0.5,
            ErrorShape::RightSkewed => 0.95 * 0.975 + 0.05 * 0.475,
            ErrorShape::LeftSkewed => 0.95 * 0.025 + 0.05 * 0.525,
            ErrorShape::Beta { a, b } => a / (a + b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellVerdict {
    Valid,
    Invalid,
    Undefined,
    Boundary,
}

#[derive(Debug, Clone)]
pub struct RegionGrid {
    pub delta_min_values: Vec<f64>,
    pub delta_max_values: Vec<f64>,
    /// Row-major over (delta_min index, delta_max index).
    pub cells: Vec<CellVerdict>,
}

impl RegionGrid {
    pub fn cell(&self, row: usize, col: usize) -> CellVerdict {
        self.cells[row * self.delta_max_values.len() + col]
    }
}

fn cell_rng(seed: u64, row: usize, col: usize) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((row as u64) << 32) ^ col as u64);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Sweep validity verdicts over a grid of (delta_min, delta_max) bounds.
/// Each cell draws its normalized errors from the shape with a substream
/// keyed by (seed, row, col); cells with delta_min >= delta_max are
/// undefined.
#[allow(clippy::too_many_arguments)]
pub fn region_grid(
    profile: &WeightErrorProfile,
    alpha: f64,
    delta_min_range: (f64, f64),
    delta_max_range: (f64, f64),
    rows: usize,
    cols: usize,
    shape: ErrorShape,
    seed: u64,
) -> Result<RegionGrid> {
    let lin = |lo: f64, hi: f64, m: usize, i: usize| {
        if m == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (m as f64 - 1.0)
        }
    };
    let delta_min_values: Vec<f64> = (0..rows)
        .map(|i| lin(delta_min_range.0, delta_min_range.1, rows, i))
        .collect();
    let delta_max_values: Vec<f64> = (0..cols)
        .map(|j| lin(delta_max_range.0, delta_max_range.1, cols, j))
        .collect();
    let mut cells = Vec::with_capacity(rows * cols);
    for (i, &dmin) in delta_min_values.iter().enumerate() {
        for (j, &dmax) in delta_max_values.iter().enumerate() {
            if dmin >= dmax {
                cells.push(CellVerdict::Undefined);
                continue;
            }
            let mut rng = cell_rng(seed, i, j);
            let tilde: Vec<f64> = (0..profile.n() + 1).map(|_| shape.sample(&mut rng)).collect();
            let deltas: Vec<f64> = tilde.iter().map(|&t| dmin + t * (dmax - dmin)).collect();
            let errors = GeneralErrors::new(deltas, dmin, dmax)?;
            match general_error_verdict(profile, &errors, alpha) {
                Ok(v) => {
                    if v.case_wcp == VerdictCase::Boundary {
                        cells.push(CellVerdict::Boundary);
                    } else if v.q_hat_ge_q_wcp {
                        cells.push(CellVerdict::Valid);
                    } else {
                        cells.push(CellVerdict::Invalid);
                    }
                }
                Err(Error::SingularNormalization) => cells.push(CellVerdict::Boundary),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(RegionGrid {
        delta_min_values,
        delta_max_values,
        cells,
    })
}

/// The two boundary curves of the bounded-error validity region,
/// parameterized by the profile's partial sums and the normalized-error
/// sums of a representative draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCurve {
    pub n: usize,
    pub w_total: f64,
    pub delta_tilde_total: f64,
    /// Requirement-1 right-hand side; the req1 boundary line is
    /// delta_max = delta_min * (1/delta + 1).
    pub req1_rhs: f64,
    /// True when the req1 right-hand side vanishes, degenerating the
    /// second curve.
    pub degenerate: bool,
}

impl BoundaryCurve {
    /// Requirement-2 boundary: the delta_min at which the perturbed
    /// total mass changes sign, as a function of delta_max.
    pub fn delta_min_star(&self, delta_max: f64) -> f64 {
        -(delta_max * self.delta_tilde_total + self.w_total)
            / (self.n as f64 + 1.0 - self.delta_tilde_total)
    }

    /// Requirement-1 boundary: the delta_max on the req1 equality line
    /// for a given delta_min.
    pub fn delta_max_star(&self, delta_min: f64) -> Option<f64> {
        if self.degenerate {
            None
        } else {
            Some(delta_min * (1.0 / self.req1_rhs + 1.0))
        }
    }
}

/// Boundary curves for a profile and a normalized-error vector (for
/// overlays, the shape mean replicated per coordinate works).
pub fn theoretical_boundary(
    profile: &WeightErrorProfile,
    delta_tilde: &[f64],
    alpha: f64,
) -> Result<BoundaryCurve> {
    let n = profile.n();
    if delta_tilde.len() != n + 1 {
        return Err(Error::DimensionMismatch {
            expected: n + 1,
            got: delta_tilde.len(),
        });
    }
    let kw = k_wcp(profile, alpha);
    if kw > n {
        return Err(Error::ThresholdAtInfinity);
    }
    let w_total = profile.total();
    let w_k = profile.partial_sum(kw);
    let dt_total: f64 = delta_tilde.iter().sum();
    let dt_k: f64 = delta_tilde[..kw].iter().sum();
    let pivot = pivot_sign(kw, w_k, n, w_total);
    let (req1_rhs, degenerate) = if pivot == 0.0 {
        (0.0, true)
    } else {
        let rhs = (dt_total * w_k - dt_k * w_total) / pivot;
        (rhs, rhs == 0.0)
    };
    Ok(BoundaryCurve {
        n,
        w_total,
        delta_tilde_total: dt_total,
        req1_rhs,
        degenerate,
    })
}
