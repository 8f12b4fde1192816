//! Learned lossy compression for hyperspectral image cubes.
//!
//! The pipeline: an analysis transform maps a cube to a latent tensor, a
//! hyper transform maps the latent to a hyperlatent, a factorized prior
//! codes the hyperlatent, and a conditional Gaussian model (means and
//! scales predicted from the hyperlatent) codes the latent. Both code
//! paths share one rANS coder and a fixed little-endian container.
//! Training minimizes rate + lambda * distortion end to end through a
//! small reverse-mode f64 tape.

pub mod codec;
pub mod data;
pub mod entropy;
pub mod gdn;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rans;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tensor::{ParamId, ParamSet, Parameter, Tensor4};
