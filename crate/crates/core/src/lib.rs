//! Continual-learning benchmark library.
//!
//! A small dense network with exact gradients, an SGD/plateau training loop,
//! three continual-learning strategies (joint training with fractional
//! replay, EWC with a binarized empirical Fisher diagonal, LWF with
//! partial-label soft targets), AUC-based transfer metrics, a deterministic
//! two-domain synthetic benchmark and an experiment runner that produces
//! CSV/Markdown/JSON reports.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod param;
pub mod report;
pub mod rng;
pub mod runner;
pub mod strategies;

pub use error::{Error, Result};
