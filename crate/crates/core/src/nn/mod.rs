//! Minimal dense/convolutional network engine with explicit backpropagation.
//!
//! Parameters are a single flat `Vec<f32>`; optimizers, Fisher estimates,
//! checkpoints and content hashes all operate on that vector directly.

mod layers;
pub mod loss;
mod network;
pub mod optim;

pub use layers::ImageShape;
pub(crate) use network::NetworkBuilder;
pub use network::{Backward, Network, Tape};
