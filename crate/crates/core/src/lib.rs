pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
