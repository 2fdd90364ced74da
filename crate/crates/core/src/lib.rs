//! Two-stage remote photoplethysmography: a vector-quantized PPG codec
//! learns a codebook of clean pulse features, and a video network learns to
//! query that codebook.

pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod hr;
pub mod nn;
pub mod report;
pub mod signal;
pub mod stage2;
pub mod synth;
pub mod video;

pub use error::{Error, Result};
