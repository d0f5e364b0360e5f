//! Minimal differentiable numerics: tensors, a recorded trace with reverse-mode
//! gradients, recurrent layers and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod param;
pub mod tensor;

pub use gradcheck::{check_gradient, GradCheckReport, ParamCheck, DEFAULT_EPS};
pub use graph::{Gradients, Graph, Var};
pub use layers::{bidirectional, recurrent_layer, BoundCell, BoundLinear, Direction, GatedCell, Linear};
pub use param::{NamedTensor, ParamId, ParamStore, Parameter};
pub use tensor::{log_add, log_sum_exp, matmul, softmax, Tensor};
