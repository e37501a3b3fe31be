pub mod adaptation;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod synth;
pub mod trainer;
pub mod verifier;

pub use error::{Error, Result};
