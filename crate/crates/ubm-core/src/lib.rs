//! Core library for training small text classifiers with bias-mitigation
//! objectives and measuring whether the mitigation survives transfer to a
//! downstream task.
//!
//! Everything in here is pure computation over `f64` buffers: a tape-based
//! reverse-mode autodiff engine, an embedding + mean-pool encoder with
//! task-specific classifier heads, synthetic biased-corpus generators,
//! upstream/downstream trainers, and the fairness metric suite. File formats,
//! checkpoints and the CLI live in the companion `ubm-cli` crate.
//!
//! The crate is `no_std` (with `alloc`), so it can be embedded anywhere a
//! deterministic, dependency-light training core is useful.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adam;
pub mod corpus;
pub mod downstream;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod upstream;

pub use error::{CoreError, Result};
pub use tape::{Tape, VarId};
pub use tensor::Tensor;
