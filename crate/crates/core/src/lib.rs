//! Gravitational-wave anomaly detection with a residual-difference 1-D CNN.

pub mod augment;
pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
