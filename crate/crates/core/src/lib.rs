//! DeFusion: decoupling fusion of temporal images and tabular indicators.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod table;
pub mod tensor;

pub use error::{Error, Result};
