pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod fusion;
pub mod kernels;
pub mod network;
pub mod nn;
pub mod run;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{precision, set_precision, Precision, Shape, Tensor};
