//! Core of the YOTOnet zero-shot cross-domain bearing fault-diagnosis network.
//!
//! Everything in this crate is pure computation over in-memory data and builds
//! under `#![no_std]` with `alloc`. File formats, the command line and
//! multi-threaded experiment orchestration live in the `yoto` crate.
//!
//! Layout:
//! - [`tensor`] and [`autodiff`]: dense f64 tensors with a tape-based reverse mode.
//! - [`signal`]: FFT, magnitude spectra, resampling, windowing, normalization.
//! - [`model`]: invariant feature distiller, sparse mixture of experts, heads.
//! - [`objective`]: cross-entropy, load-balance regularizer, loss composition.
//! - [`train`]: optimizers, the training loop, low-rank adapter fine-tuning.
//! - [`synth`]: seeded multi-domain bearing vibration generator.
//! - [`protocol`]: the 30-split cross-dataset evaluation engine and reports.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod objective;
pub mod protocol;
pub mod rng;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
