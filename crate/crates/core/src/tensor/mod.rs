//! Dense arrays, parameters and reverse-mode differentiation.

mod array;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;

pub use array::{matmul, DenseArray};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{gelu, layer_norm, log_sum_exp, softmax};
pub use params::{Group, InitRule, ParamId, ParamStore, Parameter};
