//! Switchable atrous convolution blocks on a small reverse-mode autodiff
//! engine, plus a toy anchor-based detector, synthetic data, training and
//! evaluation.

pub mod bench;
pub mod blocks;
pub mod cli;
pub mod config;
pub mod convert;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Result, SacError};
pub use real::Real;
pub use tensor::{Shape, Tensor};
