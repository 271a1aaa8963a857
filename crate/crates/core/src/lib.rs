//! Dual-view adaptation of a frozen ViT for fine-grained image retrieval.
//!
//! The crate is organized bottom-up: [`tensor`] provides dense tensors and a
//! differentiation tape, [`vit`] and [`ica`] build the frozen encoder and its
//! trainable adapters, and the remaining modules cover data preparation,
//! training and evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod ica;
pub mod image;
pub mod losses;
pub mod manifest;
pub mod ntw;
pub mod opa;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
