//! Counterfactual learning-to-rank over top-k click logs.
//!
//! The crate simulates position- and selection-biased clicks on LETOR-style
//! ranking datasets, trains linear rankers with inverse-propensity-scored
//! losses (policy-oblivious, policy-aware, rerank), and verifies the
//! estimators' bias properties by exact enumeration on small instances.
//!
//! Modules follow the pipeline order:
//!
//! - [`data`]: dataset parsing, synthetic generation, partitions.
//! - [`ranking`]: linear scoring, deterministic ranking, true-label metrics.
//! - [`simulate`]: logging policy, randomization, click simulation.
//! - [`estimate`]: counterfactual loss estimators and document weights.
//! - [`loss`]: differentiable surrogate losses and their gradients.
//! - [`train`]: SGD optimization, tuning, and loss selection.
//! - [`verify`]: brute-force expectation oracles for bias checks.
//! - [`experiment`]: end-to-end experiment runner behind the CLI.

pub mod data;
pub mod error;
pub mod estimate;
pub mod experiment;
pub mod loss;
pub mod ranking;
pub mod simulate;
pub mod train;
pub mod verify;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
