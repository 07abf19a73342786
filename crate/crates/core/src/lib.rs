//! Hybrid transformer whose middle layers are replaced by a
//! control-conditioned neural ODE block.

pub mod adjoint;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod field;
pub mod harness;
pub mod model;
pub mod params;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
