//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records primitive applications in execution order. Parameters
//! live in a [`ParameterStore`]; [`Graph::backward`] adds their gradients into
//! the store and returns the gradients of every other differentiable node.

mod gradcheck;
mod graph;
mod kernels;
mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var, COSINE_NORM_FLOOR};
pub use params::{truncated_normal, ParamId, Parameter, ParameterStore};

#[cfg(test)]
mod tests;
