pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod initializers;
pub mod linalg;
pub mod selection;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
