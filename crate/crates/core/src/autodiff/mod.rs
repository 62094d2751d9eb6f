//! Dense `f64` arrays with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its forward data and the op that produced it; [`Graph::backward`] walks the
//! tape in reverse. [`Value`] is a cheap handle into one graph.
//!
//! Learnable tensors live outside the tape in a [`ParamStore`] and are bound
//! into each fresh graph with [`Graph::param`].

mod checkpoint;
mod graph;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{Graph, Value};
pub use params::{AdamState, Gradients, ParamId, ParamStore, Parameter};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Broadcast-compatible iff equal, or the shorter shape is a trailing suffix of
/// the longer one. Returns the output shape.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    let (long, short) = if numel(a) >= numel(b) { (a, b) } else { (b, a) };
    // single-element operands act as scalars
    let ok = numel(short) == 1
        || (short.len() <= long.len() && long[long.len() - short.len()..] == *short);
    if !ok {
        return Err(TensorError::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(long.to_vec())
}

#[cfg(test)]
mod tests;
