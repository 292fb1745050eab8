//! CAIM-Net: change-area and change-moment detection for satellite image time series.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases below pin
//! the common choices.

pub mod autograd;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod params;
pub mod render;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use config::RunConfig;
pub use error::{CaimError, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
