//! Texture inpainting with a U-Net generator and a segmentation discriminator.

mod binio;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod seed;
pub mod train;

pub use autodiff::Tensor;
pub use error::{Error, Result};
