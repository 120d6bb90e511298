//! Dense tensors, reverse-mode differentiation, deterministic random streams
//! and a finite-difference gradient oracle.

mod gradcheck;
mod graph;
pub mod kernels;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, DEFAULT_FD_EPS};
pub use graph::{Graph, Unary, Var};
pub use rng::{stream_id_for, RngStream, StreamRng};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {what} (at {index:?})")]
    NonFinite {
        what: &'static str,
        index: Option<(usize, usize)>,
    },
}
