//! Continual relation extraction at desk scale: a small trainable encoder
//! with entity markers, two-stage training (fast adaption on new data, then
//! balanced tuning on a class-balanced exemplar memory), k-means memory
//! selection, and the diagnostics needed to study catastrophic forgetting —
//! error taxonomies, classifier probes, gradient norms, and decision
//! boundary exports.
//!
//! This crate is `no_std` + `alloc`; everything that needs files, clocks,
//! or threads lives in the companion `crelab` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod data;
pub mod diagnostics;
pub mod error;
mod mathx;
pub mod memory;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
