//! Multi-hypothesis 3D pose lifting with a mixture density network.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not care.

pub mod camera;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod mdn;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type MdnNetwork64 = mdn::MdnNetwork<f64>;
pub type MdnNetwork32 = mdn::MdnNetwork<f32>;
pub type MdnParams64 = mdn::MdnParams<f64>;
pub type Model64 = train::Model<f64>;
pub type Trainer64 = train::Trainer<f64>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
