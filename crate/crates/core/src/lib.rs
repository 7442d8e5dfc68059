pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod models;
pub mod norm;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, MaskedMoments, Scalar, Tensor};
