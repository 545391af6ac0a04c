//! Simulator and library for federated learning over a single-cell vehicular
//! network where clients train and upload low-rank (LoRA) factors, and where
//! the LoRA rank, per-vehicle bandwidth, and participating vehicles are chosen
//! jointly every round.
//!
//! Modules, bottom-up:
//!
//! - [`lora`]: low-rank layers, parameter accounting, rank upper bound.
//! - [`gap`]: truncated SVD gradient gap and convergence-bound formulas.
//! - [`scenario`]: vehicles, mobility, sojourn time, channel and delay models.
//! - [`scheduler`]: minimum-bandwidth bisection, greedy selection, rank
//!   enumeration, and the brute-force and random baselines.
//! - [`trainer`]: synthetic data, local SGD on factors, aggregation, FedAvg.
//! - [`harness`]: experiment config, round loop, metrics and output files.

pub mod error;
pub mod gap;
pub mod harness;
pub mod lora;
pub mod scenario;
pub mod scheduler;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
