//! Federated long-tailed learning simulator.
//!
//! Clients train a small MLP on non-IID shards of a synthetic long-tailed
//! dataset. The main algorithm pairs a weak/strong-view self-distillation
//! term with a logit-adjusted cross-entropy whose class prior is estimated
//! from feature correlations and fused with a server-aggregated global prior.
//! FedAvg, FedProx and a count-based balanced-softmax FedAvg are included as
//! baselines, along with the diagnostics used to compare them.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod prior;
pub mod seed;

pub use error::{Error, Result};
