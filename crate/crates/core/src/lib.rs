//! Dual-manifold multimodal training stack.
//!
//! Emotion and anti-emotion manifolds are Poincaré balls of fixed curvature.
//! Per-modality features are embedded on both, a learnable mirror layer maps
//! between them, a denoising score model runs in mirror space, and a
//! permutation-invariant fuser combines whatever modalities are present.

pub mod analysis;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradtape;
pub mod hypmath;
pub mod mirror;
pub mod model;
pub mod optim;
pub mod propdecomp;
pub mod scorefield;
pub mod train;

pub use error::{Error, Result};
