//! Segmentation with sparse annotations by synthesizing images that match
//! pseudo labels.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod label;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synthesis;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
