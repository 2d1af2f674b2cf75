//! Deterministic federated-learning simulator with validation-driven
//! noisy-client pruning.
//!
//! The pipeline is: synthetic or CSV data, a 9:1:2 train/validation/test
//! split, IID or Dirichlet partitioning across clients, symmetric label noise
//! on a random subset of clients, then federated training. In pruning mode
//! the server runs a pre-pruning phase that ranks sampled client models on the
//! validation split, fuses only the top-`m`, and counts how often each client
//! falls outside the top-`m` (the noise candidacy score). After that phase the
//! clients with the highest scores are removed once, and ordinary federated
//! training continues on the survivors.
//!
//! Every stochastic step draws from an [`rng::RngStream`] derived from the
//! root seed and a label, so runs are reproducible regardless of thread count.

pub mod aggregation;
pub mod clipfl;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod noise;
pub mod output;
pub mod partition;
pub mod rng;

pub use config::ExperimentConfig;
pub use engine::{run_simulation, RoundMetrics, RunReport};
pub use error::{Error, Result};
