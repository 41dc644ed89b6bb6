//! Desk-scale laboratory for novel categories discovery by distribution
//! learning: one network classifies labeled classes and clusters unlabeled
//! novel classes by matching the first- and second-order statistics of its
//! predicted probability matrix to a known Multinoulli prior, under
//! instance-wise entropy and consistency constraints.
//!
//! Layout follows the data flow:
//!
//! - [`matrix`] / [`tape`] / [`gradcheck`]: dense f64 matrices, reverse-mode
//!   AD on a matrix-granularity tape, and the finite-difference oracle.
//! - [`multinoulli`]: the categorical prior, its exact moments, sampling,
//!   and empirical estimators.
//! - [`synthgen`]: class-conditional Gaussian mixtures with disjoint
//!   labeled/novel class sets and label-preserving augmentations.
//! - [`model`]: the MLP encoder/embedding/softmax-head stack.
//! - [`losses`]: the five objectives and their weighted combination.
//! - [`trainer`]: the alternating labeled/unlabeled SGD loop with weight
//!   and learning-rate schedules.
//! - [`eval`]: top-1 accuracy, Hungarian-matched clustering accuracy,
//!   confusion matrices, and embedding dumps.
//! - [`config`]: declarative experiment description (TOML).

pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod multinoulli;
pub mod synthgen;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
