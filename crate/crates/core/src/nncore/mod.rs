//! Minimal dense-tensor reverse-mode autodiff: primitives, losses and Adam.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{primitive_gradcheck, PrimitiveCheck};
pub use graph::{quantize_level, Backward, Graph, NodeId, QuantMode, LEVELS, STE_CLIP};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}{}: {detail}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
    Shape { node: Option<usize>, op: &'static str, detail: String },
    #[error("node {node} takes input {input} which does not precede it (cycle)")]
    Cycle { node: usize, input: usize },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFinite { param: String },
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
