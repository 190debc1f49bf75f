//! Linking deposit and withdrawal accounts of a mixing service with
//! knowledge transferred from malicious-account detection.

pub mod error;
pub mod grad;
pub mod nn;
pub mod data;
pub mod mixfusion;
pub mod transfer;
pub mod association;
pub mod evaluation;
pub mod baselines;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
