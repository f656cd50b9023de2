//! Personalized translation models stored as sparse offsets from a shared
//! baseline.
//!
//! The crate is generic over the floating-point type. Files always store
//! 32-bit floats; `f64` is useful for gradient checking.

pub mod adapt;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Params32 = tensor::ParameterSet<f32>;
pub type Params64 = tensor::ParameterSet<f64>;
pub type Offsets32 = adapt::OffsetSet<f32>;
pub type Offsets64 = adapt::OffsetSet<f64>;
