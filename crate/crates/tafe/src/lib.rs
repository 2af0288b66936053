//! Surgical-scene segmentation built from scratch on a self-contained f64
//! tensor core: a convolutional feature pyramid, a transformer encoder
//! branch, an asymmetric strip-convolution enhancement module, and a
//! multi-stage interaction loop between the two, trained with tape-based
//! reverse-mode differentiation that is verified against finite differences.

pub mod afe;
pub mod autodiff;
pub mod bench;
pub mod checks;
pub mod encoder;
pub mod error;
pub mod init;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod synthdata;
pub mod trainer;
pub mod tensor;

pub use error::{Result, TafeError};
pub use tensor::{ConvKernel, Padding, Tensor};
