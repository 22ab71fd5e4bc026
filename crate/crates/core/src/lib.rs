//! Real-time high-resolution background matting: a coarse base network
//! predicts alpha, foreground residual, an error map and hidden features at
//! reduced resolution; a patch refiner recomputes only the cells with the
//! highest predicted error at full resolution.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. File formats, the CLI and timing live in the companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod basenet;
pub mod checkpoint;
pub mod error;
pub mod imagecore;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod refiner;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use imagecore::{AlphaMatte, ErrorMap, ForegroundResidual, Image, ResizeMode};
pub use tensor::Tensor4;
