//! Minimal differentiable computation layer: dense tensors, a fixed op
//! catalog with exact reverse-mode gradients, parameter storage and Adam.

mod graph;
pub mod gradcheck;
pub mod nn;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{sinusoidal_table, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use params::{AdamConfig, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
