//! thinice — a desk-scale laboratory for adversarially robust pruning.
//!
//! The crate trains small robust classifiers, prunes them with several
//! adversarial-pruning methods, re-evaluates robustness with a worst-case
//! attack ensemble, and statistically characterizes which samples flip
//! prediction after pruning as a function of their distance to the dense
//! model's decision boundary.
//!
//! Everything is deterministic: a single experiment seed fans out through
//! derived streams, and a full run produces byte-identical reports when
//! repeated single-threaded.

pub mod analysis;
pub mod parallel;
pub mod attacks;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod prune;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
