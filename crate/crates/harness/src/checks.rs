//! Oracle-equivalence suites: independent brute-force re-computations
//! checked against the production implementations, exactly and at scale.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use conformal_pi::calibrate::{cp_threshold, weighted_threshold, ScoreProfile};
use conformal_pi::weights::{
    constant_delta_verdict, general_error_verdict, signed_mass_compare_cp,
    signed_mass_compare_wcp, GeneralErrors, WeightErrorProfile,
};

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub mismatches: usize,
    pub elapsed: std::time::Duration,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Explicit cumulative-enumeration quantile over weighted atoms plus an
/// infinite atom, kept independent of the production engine.
fn brute_weighted_threshold(scores: &[f64], weights: &[f64], test_weight: f64, level: f64) -> f64 {
    let mut pairs: Vec<(f64, f64)> = scores
        .iter()
        .copied()
        .zip(weights.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = weights.iter().sum::<f64>() + test_weight;
    let mut cum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            cum += pairs[i].1;
            i += 1;
        }
        if cum >= level * total {
            return s;
        }
    }
    f64::INFINITY
}

/// Weighted-quantile oracle equivalence on random small instances.
pub fn check_weighted_vs_enumeration(instances: usize, seed: u64) -> CheckReport {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=12usize);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..4.0)).collect();
        let tw = rng.random_range(0.05..4.0);
        let level = rng.random_range(0.05..0.95);
        let profile = ScoreProfile::new(scores.clone(), weights.clone(), tw).unwrap();
        let fast = weighted_threshold(&profile, level).unwrap().value;
        let brute = brute_weighted_threshold(&scores, &weights, tw, level);
        if fast != brute {
            mismatches += 1;
        }
    }
    CheckReport {
        name: "weighted-quantile vs cumulative enumeration",
        instances,
        mismatches,
        elapsed: start.elapsed(),
    }
}

/// Exhaustive uniform-weight reduction: the weighted quantile with all
/// weights one must equal the order-statistic threshold for every n up
/// to 50 and every alpha on a 0.01 grid.
pub fn check_uniform_reduction(seed: u64) -> CheckReport {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut instances = 0;
    for n in 1..=50usize {
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let profile = ScoreProfile::new(scores.clone(), vec![1.0; n], 1.0).unwrap();
        for pct in 1..=99usize {
            let alpha = pct as f64 / 100.0;
            instances += 1;
            let w = weighted_threshold(&profile, 1.0 - alpha).unwrap().value;
            let c = cp_threshold(&scores, alpha).value;
            if w != c {
                mismatches += 1;
            }
        }
    }
    CheckReport {
        name: "uniform-weight reduction to order statistic",
        instances,
        mismatches,
        elapsed: start.elapsed(),
    }
}

/// Constant-error validity predicate against the direct signed-mass
/// threshold comparison, both threshold lists.
pub fn check_constant_delta_soundness(instances: usize, seed: u64) -> CheckReport {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut done = 0;
    while done < instances {
        let n = rng.random_range(2..=12usize);
        let alpha = rng.random_range(0.05..0.6);
        let weights: Vec<f64> = (0..n + 1).map(|_| rng.random_range(0.05..3.0)).collect();
        let profile = WeightErrorProfile::new(weights).unwrap();
        let delta = rng.random_range(-3.0..3.0);
        if (delta + profile.total() / (n as f64 + 1.0)).abs() < 1e-9 {
            continue;
        }
        let verdict = constant_delta_verdict(&profile, alpha, delta).unwrap();
        let deltas = vec![delta; n + 1];
        let oracle_wcp = signed_mass_compare_wcp(&profile, &deltas, alpha).unwrap();
        let oracle_cp = signed_mass_compare_cp(&profile, &deltas, alpha).unwrap();
        if verdict.q_hat_ge_q_wcp != oracle_wcp || verdict.q_hat_ge_q_cp != oracle_cp {
            mismatches += 1;
        }
        done += 1;
    }
    CheckReport {
        name: "constant-error verdict vs signed-mass comparison",
        instances,
        mismatches,
        elapsed: start.elapsed(),
    }
}

/// Bounded per-sample errors: verdict against the direct signed-mass
/// threshold comparison.
pub fn check_general_delta_soundness(instances: usize, seed: u64) -> CheckReport {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut done = 0;
    while done < instances {
        let n = rng.random_range(2..=12usize);
        let alpha = rng.random_range(0.05..0.6);
        let weights: Vec<f64> = (0..n + 1).map(|_| rng.random_range(0.05..3.0)).collect();
        let profile = WeightErrorProfile::new(weights).unwrap();
        let dmin = rng.random_range(-2.0..0.5);
        let dmax = dmin + rng.random_range(0.05..2.5);
        let deltas: Vec<f64> = (0..n + 1).map(|_| rng.random_range(dmin..dmax)).collect();
        let total_shift: f64 = deltas.iter().sum();
        if (profile.total() + total_shift).abs() < 1e-9 {
            continue;
        }
        let errors = GeneralErrors::new(deltas.clone(), dmin, dmax).unwrap();
        let verdict = match general_error_verdict(&profile, &errors, alpha) {
            Ok(v) => v,
            // true threshold at the infinite atom is outside the
            // predicate's precondition
            Err(_) => continue,
        };
        let oracle_wcp = signed_mass_compare_wcp(&profile, &deltas, alpha).unwrap();
        let oracle_cp = signed_mass_compare_cp(&profile, &deltas, alpha).unwrap();
        if verdict.q_hat_ge_q_wcp != oracle_wcp || verdict.q_hat_ge_q_cp != oracle_cp {
            mismatches += 1;
        }
        done += 1;
    }
    CheckReport {
        name: "bounded-error verdict vs signed-mass comparison",
        instances,
        mismatches,
        elapsed: start.elapsed(),
    }
}

/// Run every suite at selftest scale.
pub fn run_all() -> Vec<CheckReport> {
    vec![
        check_weighted_vs_enumeration(1000, 101),
        check_uniform_reduction(102),
        check_constant_delta_soundness(1000, 103),
        check_general_delta_soundness(1000, 104),
    ]
}
