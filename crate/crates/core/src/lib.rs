pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod interventions;
pub mod model;
pub mod partition;
pub mod runs;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
