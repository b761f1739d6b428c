pub mod error;
pub mod autodiff;
pub mod bitpack;
pub mod checkpoint;
pub mod data;
pub mod entropy;
pub mod model;
pub mod quant;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
