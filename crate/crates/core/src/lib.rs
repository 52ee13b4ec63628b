//! Omni-modal front-end at desk scale.

pub mod audio;
pub mod error;
pub mod fusion;
pub mod grad;
pub mod gradsuite;
pub mod tensor;
pub mod tensor_io;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::Tensor;
