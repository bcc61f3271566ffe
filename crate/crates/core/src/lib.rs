pub mod error;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod alignment;
pub mod checkpoint;
pub mod event;
pub mod fusion;
pub mod image;
pub mod objectives;
pub mod preprocessing;
pub mod selection;
pub mod synth;
