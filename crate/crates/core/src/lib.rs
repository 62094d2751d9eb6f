//! Rank-oriented query mechanisms, ranking-aware losses and high-order
//! matching for a miniature detection transformer, with the numerics,
//! matching, metrics and experiment plumbing needed to train and evaluate it.

pub mod autodiff;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod query;
pub mod rank;
pub mod scene;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
