//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly and,
//! when one of its operands tracks gradients, records itself so that
//! [`Graph::backward`] can replay the tape in reverse.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{erf_approx, sigmoid, softplus, Tensor};

#[allow(unused_imports)]
pub(crate) use tensor::{cholesky, cholesky_solve, gemm_acc, gemm_nt_acc};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward requires a single-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; call clear_backward first")]
    BackwardTwice,
    #[error("backward called on an empty graph")]
    EmptyGraph,
    #[error("{0}: matrix is not positive definite")]
    NotPositiveDefinite(&'static str),
}
