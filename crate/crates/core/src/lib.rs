//! Soft-contrastive test-time adaptation on a surrogate vision-language
//! model: objectives, closed-form gradients, a confident memory, a
//! non-episodic adaptation engine, synthetic streams and evaluation metrics.

pub mod datagen;
pub mod demo;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod gradients;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pseudo;

pub use error::{Error, Result};
