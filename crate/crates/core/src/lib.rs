pub mod analysis;
pub mod autodiff;
pub mod cells;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
