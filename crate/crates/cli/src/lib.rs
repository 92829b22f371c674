//! Experiment orchestration on top of `itfa-core`: configuration, the base and
//! fine-tuning pipeline with freeze and leakage audits, the ablation grid, reports,
//! plots and detection rendering.

pub mod ablation;
pub mod audit;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod plots;
pub mod render;

pub use error::{Error, Result};
