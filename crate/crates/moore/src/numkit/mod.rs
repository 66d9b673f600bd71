//! Dense numeric kernel: tensors, a reverse-mode tape, Adam, and a
//! finite-difference gradient checker. Everything learnable in this repo is
//! assembled from these primitives.

mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_many, GradCheckReport};
pub use optim::{Adam, AdamSlot};
pub use tape::{Activation, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value rejected at {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function is not deterministic: repeated evaluations differ")]
    NonDeterministic,
    #[error("{0}")]
    Contract(String),
}
