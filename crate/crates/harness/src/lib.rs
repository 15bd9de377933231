//! Experiment harness: configuration, multi-repeat runs, delta sweeps,
//! validity-region cross-checks, the robustness matrix, self-check
//! suites, and SVG figure emission.

pub mod checks;
pub mod config;
pub mod experiment;
pub mod plot;
pub mod sweep;
