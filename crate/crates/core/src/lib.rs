//! Multimodal glioma sub-typing pipeline.

pub mod class;
pub mod cli;
pub mod dcn;
pub mod ensemble;
pub mod error;
pub mod histo;
pub mod imaging;
pub mod manifest;
pub mod metrics;
pub mod radio;
pub mod seed;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use class::{Class, Modality};
pub use error::{Error, Result};
