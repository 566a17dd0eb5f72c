//! Latent-traversal conditional generation for continuous multimodal
//! regression.
//!
//! The crate provides a small f64 tensor library with reverse-mode
//! automatic differentiation, unit-sphere latent code bookkeeping, the
//! encoder/generator/latent-dynamics networks, the alternating training
//! loop with Lipschitz noise-injection penalties, inference-time latent
//! traversal with momentum correction, and the associated metrics,
//! datasets and file formats.

pub mod checkpoint;
pub mod error;
pub mod latent;
pub mod networks;
pub mod tensor;
