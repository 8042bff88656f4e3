//! Topology-aware graph attention fusion of multi-modal retinal images.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. It contains the tensor/autodiff engine, the network, the losses,
//! vessel-graph extraction, synthetic data and the evaluation metrics. File
//! formats, the training pipeline and the command line live in the `tagat`
//! crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod config;
pub mod data;
pub mod encoder;
pub mod fusion;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tae;
pub mod tensor;
pub mod train;
pub mod vessel;

pub use autograd::{ConvSpec, Gradients, Padding, Tape, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
