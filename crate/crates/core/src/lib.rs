//! Desk-scale toolkit for neural-network quantization in low-data regimes.
//!
//! The crate is organized around four subsystems:
//!
//! - [`nnkit`] — a small tensor engine with reverse-mode autodiff, the layer
//!   set needed by the pipeline (conv, BatchNorm, layer-norm, attention),
//!   float training, and model serialization.
//! - [`quant`] — uniform fake quantization, PTQ step calibration, learned
//!   rounding reconstruction, and QAT finetuning initialized from the PTQ
//!   solution.
//! - [`filter`] — in-distribution selection of candidate images: energy
//!   scores, BatchNorm sensitivity, patch-similarity entropy, and the
//!   two-stage filtering pipeline.
//! - [`datasrc`] — prompt construction, a procedural synthetic image source,
//!   controlled corruption, dataset file I/O, and an HTTP client for an
//!   external text-to-image service.

pub mod datasrc;
pub mod error;
pub mod filter;
pub mod nnkit;
pub mod quant;

pub use error::{Error, Result};
pub use nnkit::model::{Arch, Model};
pub use nnkit::rng::Rng;
pub use nnkit::tensor::Tensor;
