//! Incremental few-shot object detection at desk scale: a miniature two-stage detector
//! trained on base classes, split into parallel base/novel branches and fine-tuned on
//! K-shot novel data with the whole base path frozen.

pub mod detector;
pub mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod inference;
pub mod nn;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
