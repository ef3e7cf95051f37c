//! Hessian-aware mixed-precision quantization for small transformer
//! encoders.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`params`], [`objective`]: dense tensors, a reverse-mode
//!   tape, and block Hessian-vector products.
//! - [`quant`]: uniform quantization, straight-through gradients, the
//!   integer matmul path, and group-wise ranges.
//! - [`hessian`]: power iteration on Hessian blocks, eigenvalue
//!   distributions over data shards, the Ω sensitivity, loss landscapes.
//! - [`allocate`]: bit assignment from sensitivities and model-size
//!   accounting.
//! - [`model`], [`train`]: a toy encoder classifier, synthetic tasks,
//!   baseline training and quantization-aware fine-tuning.
//! - [`analysis`], [`checkpoint`]: attention KL comparison, report tables
//!   and the binary tensor container.

pub mod allocate;
pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod hessian;
pub mod model;
pub mod objective;
pub mod params;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use objective::ComputeMode;
pub use params::{GradientSet, ParamSet};
pub use tensor::Tensor;

/// Deterministic per-stream seed: SplitMix64 applied to `base` advanced
/// by `stream + 1` increments.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
