//! Raster, flow and gradient types with their file formats.

mod flow;
mod flowio;
mod raster;

pub use flow::{flow_to_rgb, gradient, rgb_to_flow, FlowField, GradientField};
pub use flowio::{load_flow, read_flow, save_flow, write_flow, FLOW_MAGIC};
pub use raster::{load_image, luma601, save_image, RasterImage};
