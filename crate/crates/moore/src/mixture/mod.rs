//! Representation mechanism: mixture of experts, differentiable
//! Gram-Schmidt onto the Stiefel manifold, task-weighted combination, and
//! per-task or shared output functions.

mod encoder;
mod gram_schmidt;
mod heads;
mod pipeline;

pub use encoder::{ConvNet, DenseLayer, DenseNet, Encoder};
pub use gram_schmidt::{
    gram_schmidt, mutual_span_residual, span_residual, stiefel_residual,
    ExpertRepresentations, GsError, GsMode, OrthonormalBasis,
};
pub use heads::{onehot_batch, HeadMode, OutputHead, TaskContext, TaskEncoder};
pub use pipeline::{
    combine, Actor, CombineActivation, Critic, ForwardTrace, MixtureNet, PolicyOutput,
    Representation, ExpertStack, LOG_STD_MAX, LOG_STD_MIN,
};
