//! Command-line training, stylization and the HTTP service on top of
//! `aesust-core`.

pub mod config;
pub mod dataset;
pub mod imageio;
pub mod persist;
pub mod request;
pub mod selfcheck;
pub mod service;
pub mod synth;
pub mod training;
