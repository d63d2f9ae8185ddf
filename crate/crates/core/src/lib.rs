//! Pothole verification with Siamese embeddings.
//!
//! The crate is layered bottom-up: [`tensor`] provides the differentiable
//! numerics, [`imaging`] the preprocessing, [`network`] the layer stacks and
//! checkpoints, [`data`] dataset handling and pair sampling, [`training`] the
//! losses and optimization loop, and [`evaluation`] the verification metrics.

pub mod audit;
pub mod error;
pub mod evaluation;
pub mod data;
pub mod imaging;
pub mod network;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
