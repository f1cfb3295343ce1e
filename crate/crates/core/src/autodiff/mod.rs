//! Tensor arithmetic with reverse-mode automatic differentiation.

mod broadcast;
mod gradcheck;
mod graph;
mod kernels;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{BatchStats, GradientMap, Gradients, Graph, Var};
#[allow(unused_imports)]
pub(crate) use graph::{sigmoid, softplus};

#[cfg(test)]
mod tests;
