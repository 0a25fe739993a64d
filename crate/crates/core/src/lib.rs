//! Patched diffusion at desk scale.
//!
//! The variance-preserving forward process, the lossless patch transform,
//! x/eps/v parameterization algebra, the exact posterior-mean denoiser of an
//! empirical dataset, a small trainable patched denoiser, guided ancestral
//! sampling with model splitting, and throughput/memory/distortion benches.

pub mod bench;
pub mod blob;
pub mod checks;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod figures;
pub mod model;
pub mod oracle;
pub mod param;
pub mod patching;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
