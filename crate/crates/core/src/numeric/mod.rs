//! Tensors, differentiable primitives and gradient computation.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{
    compute_gradients, finite_diff_gradient, max_relative_error, GradientMap, Param, ParameterStore,
};
pub use tensor::{cross_entropy, softmax, Tensor, PROB_FLOOR};

#[cfg(test)]
mod op_gradient_tests;
