//! Tensor-level automatic differentiation: a define-by-run graph with
//! reverse-mode adjoints, forward-mode tangents expressed as graph nodes
//! (forward-over-reverse), and the Adam optimizer.

mod adam;
mod fastmath;
mod graph;
mod kernels;
mod nets;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, NodeId, Segment};
pub use nets::{
    input_gradient_norm, time_derivative, BoundMlp, DualNode, DualTensor, LayerParams, Mlp,
    MlpSpec, NetGraph, NetLayer,
};
pub use tensor::Tensor;

