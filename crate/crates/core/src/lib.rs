//! Occupancy world model on triplane latents.
//!
//! Pipeline: a codec compresses semantic occupancy grids into three
//! orthogonal feature planes; per-plane multi-scale transformers forecast
//! sparse latent *changes* which integrate residually into future states;
//! a planning head derives ego motion from those changes. Everything runs
//! on a small deterministic CPU numerics core.

pub mod error;
pub mod nn;
pub mod codec;
pub mod occ;
pub mod synth;

pub use error::{Error, Result};
