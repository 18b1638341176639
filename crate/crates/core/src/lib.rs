//! Anchored dual-branch transformer surrogate for external aerodynamics.

pub mod dataio;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod math;
pub mod model;
pub mod postprocess;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
