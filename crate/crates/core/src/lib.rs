pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod harness;
pub mod modeling;
pub mod nn;
pub mod predictor;
pub mod twin;
pub mod unlearn;

pub use error::{Error, Result};
