pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
