//! Aesthetic-enhanced universal style transfer: networks, losses, training
//! steps and runtime controls. `no_std` with `alloc`; file and network IO
//! live in the `aesust` crate.

#![no_std]

extern crate alloc;

pub mod aessa;
pub mod archive;
pub mod backbone;
pub mod controls;
pub mod discriminator;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod real;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::AesUst;
pub use nn::ChannelScale;
pub use real::Real;
pub use tensor::Tensor;
