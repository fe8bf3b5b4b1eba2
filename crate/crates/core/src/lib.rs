//! Angular-margin attention distillation for small convolutional networks.

pub mod amd;
pub mod cli;
pub mod attention;
pub mod data;
pub mod error;
pub mod kd;
pub mod metrics;
pub mod nn;
pub mod train;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
