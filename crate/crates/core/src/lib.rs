//! Preprocessing, attention modules, a miniature MBConv backbone, training
//! and evaluation for binary histopathology classification.

pub mod attention;
pub mod backbone;
pub mod checks;
pub mod data;
pub mod error;
pub mod hash;
pub mod metrics;
pub mod params;
pub mod preprocess;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
