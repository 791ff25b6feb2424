//! Structural-similarity feature distillation for class-incremental
//! learning, with its own small autodiff engine.

pub mod config;
pub mod data;
pub mod distill;
pub mod engine;
pub mod error;
pub mod exemplar;
pub mod metrics;
pub mod net;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
