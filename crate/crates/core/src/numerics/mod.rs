//! Dense tensors, reverse-mode differentiation and gradient checking.

mod float;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use float::Float;
pub use gradcheck::{
    check_gradients, evaluate_f64, relative_error, CoordinateCheck, GradCheckConfig, GradCheckReport, Objective,
    Precision,
};
pub use graph::{Gradients, Graph, OpKind, Segments, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use graph::{cosine_parts, lse, softmax_into};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dim { op: String, left: Vec<usize>, right: Vec<usize> },
    #[error("index {index} out of bounds for extent {bound}")]
    Index { index: usize, bound: usize },
    #[error("non-finite value first produced by node {node} ({op:?})")]
    NonFinite { node: usize, op: OpKind },
}
