//! Training-free acceleration of diffusion transformers by block-wise feature
//! caching.
//!
//! A toy diffusion transformer ([`dit`]) is sampled with DDIM
//! ([`diffusion`]). The [`engine`] intercepts every block, ranks blocks by how
//! much their residual deltas are expected to change, recomputes only the
//! least stable ones and serves the rest by linear extrapolation from a
//! per-block cache. [`ratio`] fits a timestep-dependent recompute ratio,
//! [`trace`] records runs and scores rankings against an offline oracle, and
//! [`metrics`] compares the resulting latents.

pub mod blob;
pub mod cli;
pub mod diffusion;
pub mod dit;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod ratio;
pub mod trace;

pub use error::{Error, Result};
