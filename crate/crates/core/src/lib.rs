//! Square-root inverse estimation with Schmidt-type partial updates, and a
//! two-mode SLAM pipeline built on it.

pub mod config;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod factor;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod runner;
pub mod simulator;

pub use error::{Error, Result};
