//! Federated-learning simulator with a feedback-loop backdoor defense.
//!
//! The crate is organised bottom-up:
//!
//! * [`ml`]: a small softmax classifier (optionally with one tanh hidden
//!   layer), SGD training and per-class error measurement.
//! * [`data`]: synthetic Gaussian-blob datasets, client/server splits,
//!   Dirichlet non-IID partitioning and label poisoning.
//! * [`protocol`]: client selection, the global aggregation rule and a full
//!   training round behind a secure-aggregation boundary.
//! * [`attack`]: model-replacement backdoor attacks, including an adaptive
//!   variant that simulates the defense before submitting.
//! * [`lof`]: Local Outlier Factor scoring.
//! * [`defense`]: error-variation vectors, per-validator validation, quorum
//!   arithmetic and the accept/reject feedback round.
//! * [`harness`]: experiment configuration, scenario execution, sweeps and
//!   report emission.

pub mod attack;
pub mod data;
pub mod defense;
mod error;
pub mod harness;
pub mod lof;
pub mod ml;
pub mod protocol;
pub mod seed;

pub use error::{Error, Result};

/// Index of a client in `0..total_clients`.
pub type ClientId = usize;
