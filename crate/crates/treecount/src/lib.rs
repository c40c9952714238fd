//! Few-shot domain-adaptive tree counting from single overhead images.
//!
//! The pipeline: a shared hierarchical shifted-window transformer encoder
//! feeds three decoding subnets (source, target, source-target) built from
//! domain attention blocks; training matches predicted density distributions
//! to ground truth (count + entropic optimal transport + total variation),
//! aligns self- and cross-domain attention score maps across decoder scales,
//! and plays an adversarial game against a density-map domain discriminator.
//! Inference uses the target subnet alone.
//!
//! Start from the `examples/` directory for runnable walkthroughs of each
//! capability, or the `treecount` binary for the end-to-end pipeline.

pub mod cli;
pub mod data;
pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod eval;
pub mod losses;
pub mod trainer;

/// Element type used for normal (f32) runs. Gradient checks instantiate the
/// same generic code at f64.
pub type F = f32;
