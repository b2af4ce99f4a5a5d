//! Calibration-free vector quantization of transformer KV caches.
//!
//! Tokens are pushed through a Normalize–Shift–Normalize transform and a
//! Hadamard rotation so that every channel looks roughly standard normal,
//! then quantized in 8-dim sub-vectors against a single global codebook
//! built from synthetic Gaussian data. The byproducts of the transform are
//! kept (partly 4-bit double quantized) and folded back into attention.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! simulation harness live in the `nsnquant` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod codebook;
pub mod dq;
mod error;
pub mod hadamard;
pub mod kvcache;
pub mod math;
pub mod nsn;
pub mod stats;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::{SeededRng, Tensor2D};
