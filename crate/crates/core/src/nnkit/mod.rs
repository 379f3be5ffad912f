//! Minimal tensor engine: reverse-mode autodiff, the layer set used by the
//! pipeline, float training, and model serialization.

pub mod io;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use model::{Arch, Model};
pub use rng::Rng;
pub use tape::{Tape, Val};
pub use tensor::Tensor;
