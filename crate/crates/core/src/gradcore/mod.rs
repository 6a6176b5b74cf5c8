//! Minimal differentiable computation: tensors, a recording graph with
//! reverse-mode gradients, multilayer perceptrons, finite-difference checks
//! and a binary checkpoint container.

mod check;
mod container;
mod graph;
mod mlp;
mod tensor;

pub use check::{grad_check, grad_check_sampled, relative_error, GradCheckEntry, GradCheckReport};
pub use container::{read_container, write_container, Container, CONTAINER_VERSION};
pub use graph::{Graph, Var};
pub use mlp::{init_mlp, mlp_forward, Activation, LayerSpec};
pub use tensor::{Gradients, ParameterSet, Tensor};

pub(crate) use graph::sigmoid;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
