//! Long-tailed classification with class-activation-map guided feature
//! augmentation of tail classes.

pub mod augment;
pub mod cam;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
