//! Synthetic lesion generation for 3D medical volumes.
//!
//! Diffusion-based lesion inpainting with histogram-controlled texture,
//! mask generation inside bounding spheres, simple baselines, procedural
//! phantom data and evaluation metrics. The crate is `no_std` with `alloc`.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod diffmask;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod schedule;
pub mod segment;
pub mod texture;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BinaryMask, MaskSet, RoiSpec, Volume3D};
