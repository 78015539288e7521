//! Meta-pretraining of visual representations for continual few-shot learning.
//!
//! The crate trains a small residual trunk so that a linear head dropped on
//! top of its frozen features can learn a stream of classes one at a time
//! without forgetting the early ones. Training itself is a meta-objective:
//! an inner loop runs plain SGD on the head over a temporally correlated
//! stream, and the outer loop differentiates through that trajectory to
//! update the trunk. Labels are ephemeral — a bounded recall queue decides
//! how long each one stays meaningful.
//!
//! Layout:
//! - [`tensor`]: reverse-mode autodiff over a flat op arena
//! - [`arch`]: residual trunk and linear head built on the tape
//! - [`rng`]: splittable counter-based randomness, reproducible by key
//! - [`parallel`]: process-global switch for deterministic parallelism

pub mod arch;
pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod optim;
pub mod parallel;
pub mod recall;
pub mod rng;
pub mod stream;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
