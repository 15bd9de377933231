//! Experiment configuration: JSON-facing structs with protocol defaults.

use serde::{Deserialize, Serialize};

use conformal_pi::calibrate::SamplerKind;
use conformal_pi::synth::CorruptionKind;
use conformal_pi::weights::ErrorShape;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Generator {
        kind: CorruptionKind,
        n: usize,
        seed: u64,
    },
    Csv {
        path: String,
        #[serde(default)]
        params: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "NAIVE_CP")]
    NaiveCp,
    #[serde(rename = "WCP_TRUE")]
    WcpTrue,
    #[serde(rename = "PCP_TRUE")]
    PcpTrue,
    #[serde(rename = "PCP_EST")]
    PcpEst,
    #[serde(rename = "NAIVE_IMPUTE")]
    NaiveImpute,
    #[serde(rename = "UI")]
    Ui,
    #[serde(rename = "TRIPLY")]
    Triply,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::NaiveCp => "NAIVE_CP",
            Method::WcpTrue => "WCP_TRUE",
            Method::PcpTrue => "PCP_TRUE",
            Method::PcpEst => "PCP_EST",
            Method::NaiveImpute => "NAIVE_IMPUTE",
            Method::Ui => "UI",
            Method::Triply => "TRIPLY",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub qr_step: f64,
    pub qr_epochs: usize,
    pub qr_momentum: f64,
    pub qr_patience: usize,
    pub logistic_step: f64,
    pub logistic_epochs: usize,
    pub l2: f64,
    pub oracle_draws: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            qr_step: 0.5,
            qr_epochs: 600,
            qr_momentum: 0.9,
            qr_patience: 20,
            logistic_step: 0.5,
            logistic_epochs: 2000,
            l2: 1e-4,
            oracle_draws: 4000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub bins: usize,
    pub k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::LinearBin,
            bins: 8,
            k: 8,
        }
    }
}

fn default_alpha() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    0.005
}
fn default_repeats() -> u32 {
    30
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    #[default]
    True,
    Est,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub methods: Vec<Method>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Which weights the PCP component of TRIPLY uses.
    #[serde(default)]
    pub triply_pcp_weights: WeightSource,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(0.0 < self.beta && self.beta < self.alpha) {
            return Err(format!("beta {} outside (0, alpha)", self.beta));
        }
        if self.repeats < 1 {
            return Err("repeats must be >= 1".into());
        }
        if self.methods.is_empty() {
            return Err("methods must be non-empty".into());
        }
        if self.sampler.bins < 1 || self.sampler.k < 1 {
            return Err("sampler bins/k must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub base: ExperimentConfig,
    /// Constant shifts added to every weight.
    pub deltas: Vec<f64>,
}

fn default_grid() -> usize {
    15
}
fn default_y_draws() -> usize {
    100_000
}
fn default_band() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionConfig {
    #[serde(flatten)]
    pub base: ExperimentConfig,
    pub delta_min_range: (f64, f64),
    pub delta_max_range: (f64, f64),
    #[serde(default = "default_grid")]
    pub rows: usize,
    #[serde(default = "default_grid")]
    pub cols: usize,
    pub shape: ErrorShape,
    /// Conditional label draws at the fixed test point.
    #[serde(default = "default_y_draws")]
    pub y_draws: usize,
    /// Cells whose empirical coverage moves less than this are boundary.
    #[serde(default = "default_band")]
    pub coverage_band: f64,
}
