//! Minimal single-layer attention-only transformers on the set complement
//! task: the task itself, the model with manual gradients, numeric checks
//! of the rank and precision results, training with BEMA, random
//! hyperparameter search, and random Othello game data.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bema;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod othello;
pub mod rng;
pub mod search;
pub mod task;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
