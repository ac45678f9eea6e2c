//! Channel-level variable quantization image codec.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arith;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod container;
pub mod context_model;
pub mod controller;
pub mod error;
pub mod gmm;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod network;
pub mod params;
pub mod pixel_shuffle;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
