pub mod error;
pub mod eval;
pub mod explain;
pub mod io;
pub mod model;
pub mod relevance;
pub mod selftest;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
