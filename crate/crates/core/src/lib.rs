pub mod checks;
pub mod dataset;
pub mod error;
pub mod export;
pub mod harness;
pub mod net;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
