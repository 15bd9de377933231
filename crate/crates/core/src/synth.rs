//! Synthetic data generation: feature/PI/label mechanism plus the three
//! label-corruption mechanisms (undercoverage, overcoverage, hard
//! weights), with generator parameters retained so oracle models and
//! true likelihood-ratio weights can be reconstructed.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};

pub const DIM_X: usize = 10;
pub const DIM_Z: usize = 3;
const TARGET_MARGINAL: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    /// Default mechanism; naive calibration undercovers.
    Under,
    /// Alternative mechanism; naive calibration overcovers.
    Over,
    /// Corruption driven by an oscillatory transform of the PI, making
    /// the weights hard to estimate.
    Hard,
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "under" => Ok(Self::Under),
            "over" => Ok(Self::Over),
            "hard" => Ok(Self::Hard),
            other => Err(Error::UnknownDistribution {
                name: other.to_string(),
            }),
        }
    }
}

/// Everything needed to rebuild oracles for a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub seed: u64,
    pub kind: CorruptionKind,
    /// Per-sample corruption probabilities after exponent calibration.
    pub probs: Vec<f64>,
    /// Calibrated exponent applied to the normalized pipeline values.
    pub exponent: f64,
    /// Multiplier on every latent noise draw; 1.0 for the standard law.
    pub noise_scale: f64,
}

impl GeneratorParams {
    /// Marginal corruption probability of the fitted map.
    pub fn marginal_corruption(&self) -> f64 {
        self.probs.iter().sum::<f64>() / self.probs.len() as f64
    }

    /// Scalar PI projection used by the label and corruption mechanisms.
    pub fn pi_projection(&self, z: &[f64]) -> f64 {
        dot(&self.beta2, z)
    }

    /// Conditional label noise multiplier: 1, 2, or 8 by PI band.
    pub fn noise_band(&self, z_proj: f64) -> f64 {
        if z_proj < -3.0 {
            1.0
        } else if z_proj <= 1.0 {
            2.0
        } else {
            8.0
        }
    }

    /// Conditional mean of the label given (x, z).
    pub fn conditional_mean(&self, x: &[f64], z: &[f64]) -> f64 {
        let zp = self.pi_projection(z);
        0.3 * dot(&self.beta1, x) + 0.8 * zp + 0.2
    }

    /// One draw from the conditional label law given (x, z).
    pub fn draw_label<R: Rng>(&self, x: &[f64], z: &[f64], rng: &mut R) -> f64 {
        let zp = self.pi_projection(z);
        let e: f64 = standard_normal(rng) * self.noise_scale;
        self.conditional_mean(x, z) + self.noise_band(zp) * e
    }

    /// One fresh PI vector from the generator's PI law.
    pub fn draw_pi<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..DIM_Z).map(|_| draw_pi_component(rng, self.noise_scale)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    Normal::new(0.0, 1.0).unwrap().sample(rng)
}

fn draw_pi_component<R: Rng>(rng: &mut R, noise_scale: f64) -> f64 {
    let e1 = standard_normal(rng) * noise_scale;
    let e2 = rng.random_range(-1.0..1.0) * noise_scale;
    let e3 = standard_normal(rng) * noise_scale;
    let lambda = e1.cos().powi(2) + 0.1;
    let pois = Poisson::new(lambda).unwrap().sample(rng);
    pois * e2 + 2.0 * e3
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64)
    }
}

/// Oscillatory PI transform used by the hard-weights mechanism.
pub fn hard_transform(zp: f64) -> f64 {
    let sigmoid = 1.0 / (1.0 + (-zp / 2.0).exp());
    let num = (0.3 * (6.0 * zp.sin().powi(2)).sqrt()).atan().powf(1.0 / 3.0)
        - 0.8 * zp.powi(4).cos().tanh();
    num / (0.5 * sigmoid + 0.5) + 0.5 + (zp * zp / 5.0).sin() * (zp.powi(4) / 8.0).cos()
}

enum SurvivorFilter {
    /// Keep values at or above the 77% quantile.
    Under,
    /// Keep values at or below the 30% quantile.
    Over,
    /// Zero samples whose transform is <= 1.2 first, then keep values at
    /// or above the 50% quantile of the zeroed vector.
    Hard { transform: Vec<f64> },
}

/// Shared corruption-probability pipeline: shift, scale, saturate,
/// filter survivors, normalize to [0.2, 0.9], then raise to the exponent
/// that calibrates the marginal rate to 0.2.
fn corruption_pipeline(base: &[f64], filter: SurvivorFilter) -> Result<(Vec<f64>, f64)> {
    let n = base.len();
    let max = base.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = base.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max - min).is_finite() || max - min < 1e-12 {
        return Err(Error::ConstantPiProjection);
    }
    let q05 = quantile(base, 0.05);
    let shift = q05.min(0.0);
    let shifted: Vec<f64> = base.iter().map(|&b| b - shift).collect();
    let q95 = quantile(&shifted, 0.95);
    if q95 <= 1e-12 {
        return Err(Error::ConstantPiProjection);
    }
    let v: Vec<f64> = shifted
        .iter()
        .map(|&s| {
            let u = (s / q95 * 2.5).max(0.0);
            (1.0 - (-u).exp()).max(0.0)
        })
        .collect();

    let keep: Vec<bool> = match &filter {
        SurvivorFilter::Under => {
            let thr = quantile(&v, 0.77);
            v.iter().map(|&x| x >= thr).collect()
        }
        SurvivorFilter::Over => {
            let thr = quantile(&v, 0.30);
            v.iter().map(|&x| x <= thr).collect()
        }
        SurvivorFilter::Hard { transform } => {
            let zeroed: Vec<f64> = v
                .iter()
                .zip(transform)
                .map(|(&x, &t)| if t > 1.2 { x } else { 0.0 })
                .collect();
            let thr = quantile(&zeroed, 0.50);
            zeroed.iter().map(|&x| x >= thr && x > 0.0).collect()
        }
    };

    let survivors: Vec<f64> = v
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&x, _)| x)
        .collect();
    if survivors.is_empty() {
        return Err(Error::ConstantPiProjection);
    }
    let smin = survivors.iter().copied().fold(f64::INFINITY, f64::min);
    let smax = survivors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized: Vec<f64> = if smax - smin < 1e-12 {
        vec![0.55; survivors.len()]
    } else {
        survivors
            .iter()
            .map(|&x| 0.2 + 0.7 * (x - smin) / (smax - smin))
            .collect()
    };

    let mean_at = |gamma: f64| -> f64 {
        normalized.iter().map(|&x| x.powf(gamma)).sum::<f64>() / n as f64
    };
    let (mut lo, mut hi) = (0.01_f64, 50.0_f64);
    if mean_at(lo) < TARGET_MARGINAL - 1e-3 {
        return Err(Error::MarginalUnreachable);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) >= TARGET_MARGINAL {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gamma = 0.5 * (lo + hi);
    let mut probs = vec![0.0; n];
    let mut j = 0;
    for (i, &k) in keep.iter().enumerate() {
        if k {
            probs[i] = normalized[j].powf(gamma);
            j += 1;
        }
    }
    Ok((probs, gamma))
}

/// Default (undercoverage) mechanism: survivors above the 77% quantile.
pub fn corruption_probs_default(base: &[f64]) -> Result<(Vec<f64>, f64)> {
    corruption_pipeline(base, SurvivorFilter::Under)
}

/// Overcoverage mechanism: survivors at or below the 30% quantile.
pub fn corruption_probs_over(base: &[f64]) -> Result<(Vec<f64>, f64)> {
    corruption_pipeline(base, SurvivorFilter::Over)
}

/// Hard-weights mechanism: zero samples with transform <= 1.2, then keep
/// values at or above the 50% quantile of the zeroed vector.
pub fn corruption_probs_hard(z_proj: &[f64]) -> Result<(Vec<f64>, f64)> {
    let transform: Vec<f64> = z_proj.iter().map(|&z| hard_transform(z)).collect();
    corruption_pipeline(z_proj, SurvivorFilter::Hard { transform })
}

/// Likelihood-ratio weight from a corruption probability.
pub fn weight_from_prob(marginal_corruption: f64, p_corrupt: f64) -> f64 {
    (1.0 - marginal_corruption) / (1.0 - p_corrupt)
}

/// True weight of a generated sample, looked up by its row index.
pub fn true_weight(params: &GeneratorParams, index: usize) -> Result<f64> {
    let p = *params.probs.get(index).ok_or(Error::UnknownSample {
        index,
        n: params.probs.len(),
    })?;
    Ok(weight_from_prob(params.marginal_corruption(), p))
}

pub fn generate(n: usize, seed: u64, kind: CorruptionKind) -> Result<(Dataset, GeneratorParams)> {
    generate_with_noise_scale(n, seed, kind, 1.0)
}

/// Full generation pass. `noise_scale` multiplies every latent noise
/// draw; 0 degenerates the label law to its conditional mean.
pub fn generate_with_noise_scale(
    n: usize,
    seed: u64,
    kind: CorruptionKind,
    noise_scale: f64,
) -> Result<(Dataset, GeneratorParams)> {
    let (dataset, params, _) = generate_recording_noise(n, seed, kind, noise_scale)?;
    Ok((dataset, params))
}

/// Generation pass that also returns the recorded label-noise draws, so
/// the regression identity y = mean(x, z) + band * e can be checked
/// exactly.
pub fn generate_recording_noise(
    n: usize,
    seed: u64,
    kind: CorruptionKind,
    noise_scale: f64,
) -> Result<(Dataset, GeneratorParams, Vec<f64>)> {
    if n < 100 {
        return Err(Error::Config(format!(
            "generator needs n >= 100, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..DIM_X).map(|_| rng.random_range(1.0..5.0)).collect())
        .collect();

    let mut zs = vec![vec![0.0; DIM_Z]; n];
    for j in 0..DIM_Z {
        for row in zs.iter_mut() {
            row[j] = draw_pi_component(&mut rng, noise_scale);
        }
    }

    let mut beta1: Vec<f64> = (0..DIM_X).map(|_| rng.random_range(0.0..1.0)).collect();
    let l1: f64 = beta1.iter().map(|b| b.abs()).sum();
    beta1.iter_mut().for_each(|b| *b /= l1);
    let mut beta2: Vec<f64> = (0..DIM_Z).map(|_| rng.random_range(0.0..1.0)).collect();
    let l1: f64 = beta2.iter().map(|b| b.abs()).sum();
    beta2.iter_mut().for_each(|b| *b /= l1);

    let z_proj: Vec<f64> = zs.iter().map(|z| dot(&beta2, z)).collect();
    let mut noise = Vec::with_capacity(n);
    let ys: Vec<f64> = (0..n)
        .map(|i| {
            let band = if z_proj[i] < -3.0 {
                1.0
            } else if z_proj[i] <= 1.0 {
                2.0
            } else {
                8.0
            };
            let e = standard_normal(&mut rng) * noise_scale;
            noise.push(e);
            0.3 * dot(&beta1, &xs[i]) + 0.8 * z_proj[i] + 0.2 + band * e
        })
        .collect();

    let pipeline = match kind {
        CorruptionKind::Under => corruption_probs_default(&z_proj),
        CorruptionKind::Over => corruption_probs_over(&z_proj),
        CorruptionKind::Hard => corruption_probs_hard(&z_proj),
    };
    let (probs, exponent) = match pipeline {
        Ok(pair) => pair,
        // a silenced generator has a constant PI projection and nothing
        // to base corruption on; leave the data uncorrupted
        Err(Error::ConstantPiProjection) if noise_scale == 0.0 => (vec![0.0; n], 1.0),
        Err(e) => return Err(e),
    };

    let samples: Vec<Sample> = (0..n)
        .map(|i| {
            let corrupted = rng.random::<f64>() < probs[i];
            Sample {
                features: xs[i].clone(),
                privileged: zs[i].clone(),
                observed_label: if corrupted { None } else { Some(ys[i]) },
                clean_label: Some(ys[i]),
                corrupted,
            }
        })
        .collect();

    let dataset = Dataset::new(samples, DIM_X, DIM_Z)?;
    let params = GeneratorParams {
        beta1,
        beta2,
        seed,
        kind,
        probs,
        exponent,
        noise_scale,
    };
    Ok((dataset, params, noise))
}

pub fn write_params_json<P: AsRef<Path>>(params: &GeneratorParams, path: P) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, params)?;
    Ok(())
}

pub fn read_params_json<P: AsRef<Path>>(path: P) -> Result<GeneratorParams> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimensions_match_design() {
        let (ds, params) = generate(200, 0, CorruptionKind::Under).unwrap();
        assert_eq!(ds.d_x, 10);
        assert_eq!(ds.d_z, 3);
        assert_eq!(params.beta1.len(), 10);
        assert_eq!(params.beta2.len(), 3);
        assert!((params.beta1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((params.beta2.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn marginal_rate_calibrated_all_mechanisms() {
        for kind in [CorruptionKind::Under, CorruptionKind::Over, CorruptionKind::Hard] {
            let (ds, params) = generate(30_000, 7, kind).unwrap();
            let model_rate = params.marginal_corruption();
            assert!(
                (model_rate - 0.2).abs() <= 1e-3,
                "{kind:?}: model rate {model_rate}"
            );
            let emp = ds.samples.iter().filter(|s| s.corrupted).count() as f64 / 30_000.0;
            assert!((emp - 0.2).abs() <= 0.01, "{kind:?}: empirical rate {emp}");
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let (a, pa) = generate(500, 42, CorruptionKind::Over).unwrap();
        let (b, pb) = generate(500, 42, CorruptionKind::Over).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa.probs, pb.probs);
        assert_eq!(pa.exponent, pb.exponent);
    }

    #[test]
    fn noise_bands_partition_line() {
        let (_, params) = generate(2_000, 3, CorruptionKind::Under).unwrap();
        for zp in [-10.0, -3.0001, -3.0, -1.0, 1.0, 1.0001, 7.0] {
            let u = params.noise_band(zp);
            assert!(u == 1.0 || u == 2.0 || u == 8.0);
        }
        assert_eq!(params.noise_band(-3.0), 2.0);
        assert_eq!(params.noise_band(1.0), 2.0);
        assert_eq!(params.noise_band(-3.0000001), 1.0);
        assert_eq!(params.noise_band(1.0000001), 8.0);
    }

    #[test]
    fn label_reconstruction_identity() {
        // with the noise draws recorded, y - mean(x, z) equals band * e
        // exactly
        let (ds, params, noise) =
            crate::synth::generate_recording_noise(800, 9, CorruptionKind::Under, 1.0).unwrap();
        for (i, s) in ds.samples.iter().enumerate() {
            let m = params.conditional_mean(&s.features, &s.privileged);
            let band = params.noise_band(params.pi_projection(&s.privileged));
            assert_eq!(s.clean_label.unwrap(), m + band * noise[i]);
        }
        // the silenced generator collapses to the conditional mean
        let (ds0, p0) = generate_with_noise_scale(300, 9, CorruptionKind::Under, 0.0).unwrap();
        for s in &ds0.samples {
            let m = p0.conditional_mean(&s.features, &s.privileged);
            assert!((s.clean_label.unwrap() - m).abs() < 1e-12);
        }
    }

    #[test]
    fn probs_depend_only_on_pi() {
        let (ds, params) = generate(1_000, 11, CorruptionKind::Under).unwrap();
        // recompute with feature columns permuted: probabilities unchanged
        let z_proj: Vec<f64> = ds
            .samples
            .iter()
            .map(|s| params.pi_projection(&s.privileged))
            .collect();
        let (p2, _) = corruption_probs_default(&z_proj).unwrap();
        assert_eq!(params.probs, p2);
    }

    #[test]
    fn probability_range_by_construction() {
        for kind in [CorruptionKind::Under, CorruptionKind::Over, CorruptionKind::Hard] {
            let (_, params) = generate(5_000, 5, kind).unwrap();
            let g = params.exponent;
            let lo = 0.2f64.powf(g);
            let hi = 0.9f64.powf(g);
            for &p in &params.probs {
                assert!(
                    p == 0.0 || (p >= lo - 1e-12 && p <= hi + 1e-12),
                    "{kind:?}: p = {p} outside {{0}} U [{lo}, {hi}]"
                );
                assert!(p < 1.0);
            }
        }
    }

    #[test]
    fn monotone_base_stays_monotone_on_survivors() {
        let base: Vec<f64> = (0..400).map(|i| i as f64 / 40.0 - 4.0).collect();
        let (probs, _) = corruption_probs_default(&base).unwrap();
        let surv: Vec<(usize, f64)> = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (i, p))
            .collect();
        for w in surv.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-12, "rank order broke at {w:?}");
        }
    }

    #[test]
    fn hard_transform_spot_value_at_zero() {
        let t = hard_transform(0.0);
        let expected = 0.5 - 0.8 * 1.0f64.tanh() / 0.75;
        assert!((t - expected).abs() < 1e-12);
        assert!((t + 0.3124).abs() < 1e-3);
    }

    #[test]
    fn hard_mechanism_zeroes_low_transform() {
        let (ds, params) = generate(5_000, 13, CorruptionKind::Hard).unwrap();
        for (i, s) in ds.samples.iter().enumerate() {
            let zp = params.pi_projection(&s.privileged);
            if hard_transform(zp) <= 1.2 {
                assert_eq!(params.probs[i], 0.0);
            }
        }
    }

    #[test]
    fn weight_formula_examples() {
        assert!((weight_from_prob(0.2, 0.0) - 0.8).abs() < 1e-12);
        assert!((weight_from_prob(0.2, 0.9) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_sample_errors() {
        let (_, params) = generate(200, 1, CorruptionKind::Under).unwrap();
        assert!(true_weight(&params, 200).is_err());
        assert!(true_weight(&params, 0).is_ok());
    }

    #[test]
    fn importance_weight_normalization() {
        // E[w(Z) | M = 0] = 1 under the model law
        let (ds, params) = generate(30_000, 21, CorruptionKind::Under).unwrap();
        let mut sum = 0.0;
        let mut count = 0.0;
        for (i, s) in ds.samples.iter().enumerate() {
            if !s.corrupted {
                sum += true_weight(&params, i).unwrap();
                count += 1.0;
            }
        }
        let mean = sum / count;
        assert!((mean - 1.0).abs() < 0.05, "E[w | M=0] = {mean}");
    }

    #[test]
    fn params_json_round_trip() {
        let (_, params) = generate(200, 2, CorruptionKind::Hard).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        write_params_json(&params, &path).unwrap();
        let back = read_params_json(&path).unwrap();
        let close = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs()))
        };
        assert!(close(&back.beta1, &params.beta1));
        assert!(close(&back.probs, &params.probs));
        assert!((back.exponent - params.exponent).abs() <= 1e-12);
    }

    #[test]
    fn constant_projection_errors() {
        let base = vec![1.0; 500];
        assert!(matches!(
            corruption_probs_default(&base),
            Err(Error::ConstantPiProjection)
        ));
    }
}
