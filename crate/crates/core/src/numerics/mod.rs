//! Dense tensor substrate: storage, reverse-mode tape, optimizer and
//! gradient verification.

mod adam;
mod gradcheck;
mod graph;
mod kernels;
pub mod memtrack;
mod ops;
mod params;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_check, param_finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{layer_norm, linear, matmul, softmax_rows};
pub use params::{ParamGrads, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
