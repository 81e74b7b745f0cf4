//! Dense `f64` tensors with define-by-run reverse-mode automatic
//! differentiation, an Adam optimizer and a finite-difference gradient checker.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{AutogradError, Result};
pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{CustomOp, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{Adam, OneCycle};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
