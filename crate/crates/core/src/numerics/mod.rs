//! Dense tensors, a reverse-mode tape, parameters, the Adam optimizer, a
//! seeded generator, and a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, LeafReport};
pub use graph::{Gradients, Graph, Var, MASK_FILL};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::RngState;
pub use tensor::Tensor;

/// Working precision for every tensor in the crate.
pub type Real = f64;

/// Gradient-check tolerance at 64-bit precision.
pub const GRAD_TOL_F64: Real = 1e-4;
/// Gradient-check tolerance if the crate is ever built at 32-bit precision.
pub const GRAD_TOL_F32: Real = 1e-2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
