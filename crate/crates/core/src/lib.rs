pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod export;
pub mod manifest;
pub mod model;
pub mod objectives;
pub mod probe;
pub mod trainer;
pub mod seed;

pub use error::{Error, Result};
