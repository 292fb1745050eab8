//! Forward/backward numerical kernels shared by the autodiff tape.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod lstm;
pub mod norm;
pub mod resample;

pub use activation::{relu, softmax};
pub use conv::{conv2d_cost, Conv2dSpec};
pub use resample::{bilinear_upsample, depth_to_space, space_to_depth};
