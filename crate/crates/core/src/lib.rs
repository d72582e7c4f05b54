//! Prototype-matching out-of-distribution segmentation.
//!
//! Dense patch features are compared against a bank of per-class prototype
//! vectors; pixels that match no known class well are flagged as OOD and can
//! be snapped to class-agnostic mask proposals.

pub mod bank;
pub mod detector;
pub mod error;
pub mod extractor;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod refiner;
pub mod synthetic;
pub mod tensor_io;

pub use error::{Error, Result};
