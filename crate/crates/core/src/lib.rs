//! Adaptive label smoothing for sequence-to-sequence dialogue models.

pub mod adalabel;
pub mod baselines;
pub mod data;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
