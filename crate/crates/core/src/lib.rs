//! Guided anisotropic diffusion, semantic difference convolution and the
//! semantic diffusion neck, with boundary-aware segmentation metrics and a
//! small synthetic benchmark.

pub mod bench;
pub mod diffusion;
pub mod error;
pub mod grad;
pub mod io;
pub mod metrics;
pub mod ops;
mod par;
pub mod sdn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{concat_channels, FeatureMap, Scalar, Tensor};
