//! Convolutional classifiers for multivariate series and dimension-wise
//! class activation maps (dCAM) computed over permutation cubes.

pub mod bench;
pub mod cam;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod series;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
