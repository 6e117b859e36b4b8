//! Multi-task face inpainting: reconstructs masked regions of a face image
//! while predicting its 68 facial landmarks.

pub mod assessment;
pub mod checkpoint;
pub mod data;
pub mod embedder;
pub mod inference;
mod error;
pub mod landmark;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod network;
pub mod training;

pub use error::{Error, Result};
