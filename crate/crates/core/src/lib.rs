//! Sequential self-teaching for weakly labeled sound event recognition.
//!
//! A cascade of students is trained on convex blends of the observed (noisy)
//! weak labels and the predictions of earlier students. Each student is a
//! small convolutional segment model whose segment scores are pooled into
//! recording-level predictions by class-specific attention.

pub mod autodiff;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod mil;
pub mod noise;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::Tensor;
