//! Minimal reverse-mode differentiation over dense real arrays.
//!
//! A [`Graph`] records primitives as they are evaluated (define-by-run). The
//! primitive set covers what the field model needs: elementwise arithmetic,
//! matrix products, the usual activations, reductions, concatenation, row
//! gathers, and the trilinear gather/scatter pair used for particle-to-grid
//! transfer. [`Graph::backward`] runs a single reverse sweep.
//!
//! Everything is generic over [`Real`]: `f32` for training, `f64` when the
//! gradients are checked against [`finite_difference_gradient`].

mod fd;
mod graph;
mod tensor;

pub use fd::{finite_difference_at, finite_difference_gradient, relative_error};
pub use graph::{scatter_binned, Gradients, Graph, Lattice, ScatterPlan, Var};
pub use tensor::{Real, Tensor};

#[cfg(test)]
pub(crate) use graph::softplus;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requested for a value that was not computed in this graph")]
    NotForwarded,
    #[error("seed shape {seed:?} differs from output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },
    #[error("loss function is not deterministic ({first} then {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

#[cfg(test)]
mod tests;
