//! Core of the sparse double descent laboratory.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! a small reverse-mode tensor engine, the VGG-like/MLP model family,
//! global magnitude pruning with perturbation modes, response-based
//! knowledge distillation, the activation-state entropy probe, and the
//! iterative prune/retrain controllers. File IO, configuration and the
//! command line live in the `sdd-lab` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod entropy;
pub mod error;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod sparsify;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
