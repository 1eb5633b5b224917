pub mod error;
pub mod experiment;
pub mod fluid;
pub mod grid;
pub mod limit;
pub mod ou;
pub mod rough;
pub mod operators;
pub mod scalar;
pub mod slowfast;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

pub type LinearOperator64 = operators::LinearOperator<f64>;
pub type Tensor64 = operators::Tensor2<f64>;
pub type Basis64 = fluid::TorusBasis<f64>;
pub type Field64 = fluid::VelocityField<f64>;
