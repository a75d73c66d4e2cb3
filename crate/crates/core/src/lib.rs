//! Drag-based editing for 3D Gaussian splatting scenes.
//!
//! The pipeline deforms captured Gaussians toward user targets, renders
//! per-view edit masks, asks a view corrector for improved images and
//! optimizes the editable Gaussians' appearance against them, over a
//! progressive sequence of intervals.

pub mod deform;
pub mod image;
pub mod loss;
pub mod mask;
pub mod optimize;
pub mod ply;
pub mod render;
pub mod scene;
pub mod scheduler;
pub mod synthetic;

pub use deform::{DragSpec, HandleTransform};
pub use scene::{Gaussian, GaussianScene, Vec3};
