//! Hybrid offline/online reinforcement learning for linear MDPs.
//!
//! Two learners share one numerical core:
//!
//! * [`rappel`] augments an offline dataset with reward-agnostic exploration
//!   ([`optcov`]) and plans pessimistically on the combined data
//!   ([`offline`]), returning a fixed deterministic policy.
//! * [`hyrule`] warm-starts a variance-weighted optimistic online learner
//!   with rare policy switching from offline episodes.
//!
//! [`diagnostics`] computes coverage and concentrability quantities and
//! exact or Monte Carlo policy values; [`harness`] runs seeded experiments
//! and writes CSV results.

pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod harness;
pub mod hyrule;
pub mod linalg;
pub mod offline;
pub mod optcov;
pub mod qfunc;
pub mod rappel;
pub mod rng;

pub use error::{Error, Result};
