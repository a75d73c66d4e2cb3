//! CPU splatting renderer.

pub mod camera;
pub mod raster;

use thiserror::Error;

pub use camera::{cameras_to_json, load_cameras, parse_cameras, Camera};
pub use raster::{
    backward_accumulate, backward_rgb, backward_traced, pick, project_gaussian, rasterize_coverage, rasterize_depth,
    rasterize_rgb, rasterize_scalar, Frame, ParamGrad, Projected, Trace,
};

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("expected {expected} per-gaussian values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("pixel ({x}, {y}) is outside the viewport")]
    OutOfViewport { x: f64, y: f64 },
    #[error("camera `{id}` is invalid: {reason}")]
    InvalidCamera { id: String, reason: String },
    #[error("camera file: {0}")]
    CameraFile(String),
}
