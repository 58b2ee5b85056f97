//! Patch-based document image rectification.
//!
//! Local patch flows are stitched in the gradient domain: a per-pixel patch
//! choice is optimized with graph cuts, the selected gradients are integrated
//! by a screened Poisson solve anchored on the center-most patch, and the
//! distorted image is resampled by iteratively inverting the forward flow.

pub mod error;
pub mod flowest;
pub mod illum;
pub mod imagecore;
pub mod metrics;
pub mod patching;
pub mod pipeline;
pub mod poisson;
pub mod resample;
pub mod scalar;
pub mod stitch;
pub mod synthgen;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use imagecore::{FlowField, GradientField, RasterImage};

/// Single-precision flow, the default sample type.
pub type Flow = FlowField<f32>;
pub type Flow64 = FlowField<f64>;
pub type Gradient = GradientField<f32>;
pub type Gradient64 = GradientField<f64>;
