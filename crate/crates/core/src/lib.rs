//! Prompt-conditioned semi-supervised image segmentation.
//!
//! One network with a shared encoder and two decoders segments whichever
//! structure a text prompt names. Training mixes ground-truth supervision
//! with pseudo-labels rectified by their ensemble variance.

pub mod autograd;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod uplc;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
