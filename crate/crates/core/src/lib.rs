//! Rotation-based outlier elimination for weight-activation quantization of
//! small pre-norm transformers: Hadamard rotations, RTN/GPTQ quantizers,
//! rotation-aware low-rank adapters, and diagnostics.
//!
//! The crate is `no_std` + `alloc`; IO and file formats live in the
//! companion `rotaquant` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod hadamard;
pub mod linalg;
pub(crate) mod math;
pub mod lora;
pub mod model;
pub mod quant;
pub mod rng;
pub mod rotation;

pub use error::{Error, Result};
