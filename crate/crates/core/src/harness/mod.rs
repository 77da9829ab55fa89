//! Synthetic data, streams, metrics, configuration and experiment driver.

pub mod config;
pub mod corruption;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod records;
pub mod stream;
