//! Dense `f64` tensors, reverse-mode differentiation, and SGD with momentum.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{check_parameter_gradients, finite_difference_check, relative_error, ParamCheck};
pub use graph::{Gradients, Graph, Var};
pub use optim::{sgd_momentum_step, OptimizerState, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
