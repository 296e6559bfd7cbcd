//! Surface-water mapping and water-frequency change detection from piecewise harmonic
//! pixel models.
//!
//! The pipeline runs: scene stack → QA masking and MNDWI water masks → per-pixel
//! segmentation into stable periods (56 coefficients each) → water-frequency labels →
//! gradient-boosted regression/classification → change classes at breakpoints.

pub mod change;
pub mod coldlite;
pub mod error;
pub mod grid;
pub mod labeling;
pub mod learn;
pub mod pipeline;
pub mod io;
pub mod render;
pub mod spectral;
pub mod stack;
pub mod synth;

pub use error::{Error, Result};
