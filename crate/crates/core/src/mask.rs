//! Local editing bookkeeping: which Gaussians may change, which handle each
//! one follows, and the per-view 2D masks rendered from those flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deform::Assignment;
use crate::image::Mask2D;
use crate::render::{rasterize_scalar, Camera, RenderError};
use crate::scene::GaussianScene;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("edit state is stale: state generation {state} / {state_len} gaussians, scene generation {scene} / {scene_len} gaussians")]
    Stale { state: u64, state_len: usize, scene: u64, scene_len: usize },
    #[error("threshold {0} must lie in (0, 1)")]
    Threshold(f64),
    #[error("gaussian {0} is not editable")]
    NotEditable(usize),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("edit state file: {0}")]
    File(String),
}

/// Per-Gaussian editable flags and handle membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditState {
    pub generation: u64,
    pub editable: Vec<bool>,
    pub handle_of: Vec<Vec<usize>>,
}

impl EditState {
    pub fn len(&self) -> usize {
        self.editable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.editable.is_empty()
    }

    pub fn editable_count(&self) -> usize {
        self.editable.iter().filter(|&&e| e).count()
    }

    pub fn editable_values(&self) -> Vec<f64> {
        self.editable.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect()
    }

    /// Indices currently tracked by handle `h`.
    pub fn tracked_by(&self, h: usize) -> Vec<usize> {
        self.handle_of.iter().enumerate().filter(|(_, hs)| hs.contains(&h)).map(|(i, _)| i).collect()
    }

    pub fn check(&self, scene: &GaussianScene) -> Result<(), MaskError> {
        if self.generation != scene.generation || self.len() != scene.len() {
            return Err(MaskError::Stale {
                state: self.generation,
                state_len: self.len(),
                scene: scene.generation,
                scene_len: scene.len(),
            });
        }
        Ok(())
    }

    /// Unions the editable flags with a fresh assignment and re-targets
    /// handle tracking to it.
    pub fn merge_assignment(&mut self, assignment: &Assignment) {
        for hs in &mut self.handle_of {
            hs.clear();
        }
        for (h, ids) in assignment.per_handle.iter().enumerate() {
            for &i in ids {
                self.editable[i] = true;
                self.handle_of[i].push(h);
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("edit state json")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MaskError> {
        std::fs::write(path, self.to_json()).map_err(|e| MaskError::File(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MaskError> {
        let text = std::fs::read_to_string(path).map_err(|e| MaskError::File(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| MaskError::File(e.to_string()))
    }
}

pub fn init_edit_state(scene: &GaussianScene, assignment: &Assignment) -> EditState {
    let mut state = EditState {
        generation: scene.generation,
        editable: vec![false; scene.len()],
        handle_of: vec![Vec::new(); scene.len()],
    };
    state.merge_assignment(assignment);
    state
}

/// Extends the state over appended copies. `sources[k]` is the source of the
/// Gaussian appended at `first_new + k`. Handle tracking moves to the copies.
pub fn inherit_on_copy_paste(state: &EditState, sources: &[usize], first_new: usize) -> EditState {
    let mut out = state.clone();
    out.generation += 1;
    out.editable.truncate(first_new);
    out.handle_of.truncate(first_new);
    for &src in sources {
        out.editable.push(state.editable[src]);
        out.handle_of.push(state.handle_of[src].clone());
    }
    for &src in sources {
        out.handle_of[src].clear();
    }
    out
}

/// Children copy the parent's flags verbatim. Child indices may include the
/// parent's own slot; indices past the current length extend the state.
pub fn inherit_on_split(state: &EditState, parent: usize, children: &[usize]) -> EditState {
    let mut out = state.clone();
    out.generation += 1;
    let (editable, handles) = (state.editable[parent], state.handle_of[parent].clone());
    for &c in children {
        if c >= out.len() {
            out.editable.resize(c + 1, false);
            out.handle_of.resize(c + 1, Vec::new());
        }
        out.editable[c] = editable;
        out.handle_of[c] = handles.clone();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub threshold: f64,
    /// Dilation radius at a 512 px wide image; scaled with width.
    pub dilate_px: usize,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { threshold: 0.5, dilate_px: 10 }
    }
}

impl MaskParams {
    pub fn dilation_for_width(&self, width: usize) -> usize {
        (self.dilate_px as f64 * width as f64 / 512.0).round() as usize
    }
}

/// Thresholded (and optionally dilated) projection of the editable flags.
pub fn render_view_mask(
    scene: &GaussianScene,
    state: &EditState,
    cam: &Camera,
    threshold: f64,
    dilate_px: usize,
) -> Result<Mask2D, MaskError> {
    state.check(scene)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MaskError::Threshold(threshold));
    }
    let soft = rasterize_scalar(scene, cam, &state.editable_values())?;
    let mask = Mask2D {
        width: cam.width,
        height: cam.height,
        bits: soft.data.iter().map(|&v| v > threshold).collect(),
        view_id: cam.id.clone(),
    };
    Ok(mask.dilate(dilate_px))
}
