//! Multi-kernel selection (MKS) attention for small-object feature extraction.
//!
//! The crate is `no_std` + `alloc`. It holds everything that is pure
//! computation: a dense NCHW [`Tensor`], the primitive operators with their
//! hand-written backward passes, the spatial/channel attention modules, a
//! small backbone, AP/mAP evaluation, AdamW, a synthetic small-object task,
//! the training/ablation harness and an effective-receptive-field estimator.
//!
//! File formats, configuration parsing and the command line live in the
//! companion `mks` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod backbone;
pub mod checks;
pub mod data;
pub mod erf;
mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod reference;
pub mod rng;
mod scalar;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Shape, Tensor};
