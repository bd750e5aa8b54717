//! Residual-domain few-shot anomaly scoring and adapter training over
//! exported vision-language features.

pub mod adapters;
pub mod cli;
pub mod error;
pub mod featureio;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod residuals;
pub mod scoring;
pub mod synthgen;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
