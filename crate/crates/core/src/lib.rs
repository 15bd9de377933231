//! Conformal prediction under corrupted labels with privileged
//! information: calibration schemes (plain, weighted, privileged,
//! imputation-based, and their triply robust union), exact validity
//! predicates for inaccurate weights, and seeded synthetic data
//! generation with three corruption mechanisms.

pub mod calibrate;
pub mod data;
pub mod error;
pub mod models;
pub mod scores;
pub mod synth;
pub mod weights;

pub use error::{Error, Result};
