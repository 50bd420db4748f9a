//! Temporally consistent training for per-frame video segmentation networks.
//!
//! Training combines a temporal loss over optical-flow-warped predictions
//! with distillation of cross-frame dependencies from a larger teacher.
//! Inference stays strictly per frame.

pub mod cli;
pub mod conv_lstm;
pub mod data;
pub mod engine;
pub mod error;
pub mod flowwarp;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod similarity;
pub mod tensor;

pub use error::{Error, Result};
