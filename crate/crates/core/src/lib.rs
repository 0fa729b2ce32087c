//! Desk-scale federated-learning simulator with parameter-level learnable-mask
//! detection of poisoned model updates.
//!
//! The crate wires together:
//!
//! - [`nn`]: a minimal MLP engine over flat `f64` parameter vectors;
//! - [`data`]: synthetic datasets, non-IID partitioning, root-dataset
//!   sampling, and backdoor trigger embedding;
//! - [`stats`]: PCA, Gaussian-mixture clustering with BIC selection, and
//!   silhouette scores;
//! - [`fl`]: the communication-round engine (local training, FedAvg,
//!   attack/defense orchestration);
//! - [`attacks`]: seven model-poisoning strategies with full knowledge of
//!   honest updates;
//! - [`defenses`]: robust-aggregation and detection baselines;
//! - [`skymask`]: per-client learnable masks trained on a server root
//!   dataset, binarized and clustered to flag malicious clients;
//! - [`config`], [`runner`], [`output`]: declarative experiment
//!   configuration, round-by-round execution, and CSV/JSON artifacts.
//!
//! Everything is seeded and deterministic: a `(config, seed)` pair produces
//! byte-identical output files on every run.

pub mod attacks;
pub mod config;
pub mod data;
pub mod defenses;
pub mod error;
pub mod fl;
pub mod nn;
pub mod output;
pub mod rng;
pub mod runner;
pub mod skymask;
pub mod stats;

pub use error::{Error, Result};
