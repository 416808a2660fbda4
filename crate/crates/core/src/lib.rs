//! Contrast-conditioned U-Net segmentation.
//!
//! A small reverse-mode differentiation engine drives a 2D U-Net whose
//! convolutional blocks are modulated per channel by FiLM generators fed
//! with categorical acquisition metadata (the image contrast).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
mod conv;
pub mod data;
pub mod error;
pub mod experiment;
pub mod film;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod unet;

pub use autodiff::{Gradients, Mode, NormOptions, NormStats, Tape, Var};
pub use error::{Error, Result, TensorError};
pub use tensor::{Scalar, Tensor};
