//! Fair inference on latent outcomes with a MIMIC measurement model.
//!
//! Indicators are treated as noisy proxies of a single latent outcome that is
//! caused by covariates and a binary sensitive attribute. Scores are computed
//! with the sensitive path blocked, and the audit module checks the resulting
//! decisions against several parity notions.

pub mod audit;
pub mod cli;
pub mod data;
pub mod dif;
pub mod error;
pub mod estimate;
pub mod model;
pub mod optim;
pub mod score;
pub mod select;

pub use error::{Error, Result};
