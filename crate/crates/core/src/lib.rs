//! Decentralized stochastic subgradient descent with neighborhood-averaging
//! projections over a communication graph.
//!
//! The crate is organised as:
//! - [`graph`]: topologies, the averaging matrix and its spectrum
//! - [`loss`]: per-sample losses and subgradients
//! - [`data`]: synthetic and file-backed sample oracles
//! - [`engine`]: the serial randomized iteration and its metrics
//! - [`async_sim`]: slotted asynchronous simulation with neighborhood locks
//! - [`verify`]: reference optimum and spectral checks
//! - [`config`], [`problem`], [`experiment`]: configuration and run harness

// Negated comparisons below deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod async_sim;
pub mod config;
pub mod data;
pub mod engine;
pub mod experiment;
pub mod graph;
pub mod loss;
pub mod problem;
pub mod rng;
pub mod verify;

pub use config::ExperimentConfig;
pub use engine::{MetricsRecord, MetricsTrace};
pub use graph::Graph;
pub use loss::{LossKind, LossModel, Sample};
pub use problem::Problem;
