//! Appearance optimization for editable Gaussians: analytic DC-color and
//! opacity gradients, an Adam step, and the split primitive.

use thiserror::Error;

use crate::image::RgbImage;
use crate::loss::{loss_and_grad, LossError, LossTerms, LossWeights, Perceptual, ViewTarget};
use crate::mask::{inherit_on_split, EditState, MaskError};
use crate::render::raster::{render_rgb_traced, splat_colors};
use crate::render::{backward_accumulate, backward_traced, Camera, Frame, ParamGrad};
use crate::scene::GaussianScene;

pub const OPACITY_MIN: f64 = 1e-4;
pub const OPACITY_MAX: f64 = 0.9999;
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("expected {expected} gradients, got {got}")]
    GradLength { expected: usize, got: usize },
}

/// Render one view, evaluate the loss and back-propagate to the editable
/// Gaussians. Frozen Gaussians get exactly zero.
pub fn grad_color_opacity(
    scene: &GaussianScene,
    cam: &Camera,
    target: &ViewTarget,
    weights: &LossWeights,
    kind: Perceptual,
    editable: &[bool],
    background: [f64; 3],
) -> Result<(LossTerms, RgbImage, Vec<ParamGrad>), OptimizeError> {
    grad_in_frame(scene, &Frame::new(scene, cam), target, weights, kind, editable, background)
}

/// [`grad_color_opacity`] against an existing frame of `scene`, whose
/// opacities must be current.
pub fn grad_in_frame(
    scene: &GaussianScene,
    frame: &Frame,
    target: &ViewTarget,
    weights: &LossWeights,
    kind: Perceptual,
    editable: &[bool],
    background: [f64; 3],
) -> Result<(LossTerms, RgbImage, Vec<ParamGrad>), OptimizeError> {
    let colors = splat_colors(scene);
    let trace = frame.trace();
    let rendered = render_rgb_traced(frame, &trace, &colors, background);
    let (terms, dl_dpixel) = loss_and_grad(&rendered, target, weights, kind)?;
    let mut grads = backward_traced(scene, frame, &trace, &colors, background, &dl_dpixel);
    for (g, &e) in grads.iter_mut().zip(editable) {
        if !e {
            *g = ParamGrad::default();
        }
    }
    Ok((terms, rendered, grads))
}

/// Adds one view's loss gradient over every Gaussian, frozen ones included,
/// into `total` and returns the loss. `colors` must come from
/// [`splat_colors`] of the current scene.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_view_grad(
    scene: &GaussianScene,
    frame: &Frame,
    colors: &[[f64; 3]],
    target: &ViewTarget,
    weights: &LossWeights,
    kind: Perceptual,
    background: [f64; 3],
    total: &mut [ParamGrad],
) -> Result<LossTerms, OptimizeError> {
    let trace = frame.trace();
    let rendered = render_rgb_traced(frame, &trace, colors, background);
    let (terms, dl_dpixel) = loss_and_grad(&rendered, target, weights, kind)?;
    backward_accumulate(scene, frame, &trace, colors, background, &dl_dpixel, total);
    Ok(terms)
}

/// Adam over (DC color, activated opacity).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    m: Vec<[f64; 4]>,
    v: Vec<[f64; 4]>,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15, steps: 0, m: vec![[0.0; 4]; len], v: vec![[0.0; 4]; len] }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(
        &mut self,
        scene: &mut GaussianScene,
        grads: &[ParamGrad],
        editable: &[bool],
        lr_color: f64,
        lr_opacity: f64,
    ) -> Result<(), OptimizeError> {
        if grads.len() != scene.len() {
            return Err(OptimizeError::GradLength { expected: scene.len(), got: grads.len() });
        }
        if self.m.len() < scene.len() {
            self.m.resize(scene.len(), [0.0; 4]);
            self.v.resize(scene.len(), [0.0; 4]);
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            if !editable[i] {
                continue;
            }
            let grad = [grads[i].sh_dc[0], grads[i].sh_dc[1], grads[i].sh_dc[2], grads[i].opacity];
            let mut delta = [0.0; 4];
            for k in 0..4 {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * grad[k];
                *v = self.beta2 * *v + (1.0 - self.beta2) * grad[k] * grad[k];
                let lr = if k < 3 { lr_color } else { lr_opacity };
                delta[k] = lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
            for k in 0..3 {
                g.sh_dc[k] -= delta[k];
            }
            if delta[3] != 0.0 {
                let alpha = (g.opacity() - delta[3]).clamp(OPACITY_MIN, OPACITY_MAX);
                g.set_opacity(alpha);
            }
        }
        Ok(())
    }
}

/// Adds `src` into `dst` element-wise.
pub fn accumulate(dst: &mut [ParamGrad], src: &[ParamGrad]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for k in 0..3 {
            d.sh_dc[k] += s.sh_dc[k];
        }
        d.opacity += s.opacity;
    }
}

/// Opacity for each of two stacked children so their joint coverage matches
/// the parent: `1 - (1 - a)^2 = alpha`.
pub fn split_child_opacity(alpha: f64) -> f64 {
    1.0 - (1.0 - alpha).sqrt()
}

/// Replaces every listed Gaussian by two children along its longest axis.
/// The first child takes the parent's slot, the second is appended.
pub fn split_gaussians(
    scene: &GaussianScene,
    state: &EditState,
    indices: &[usize],
) -> Result<(GaussianScene, EditState), OptimizeError> {
    state.check(scene)?;
    if let Some(&bad) = indices.iter().find(|&&i| !state.editable[i]) {
        return Err(MaskError::NotEditable(bad).into());
    }
    let mut scene = scene.clone();
    let mut state = state.clone();
    for &parent in indices {
        let g = scene.gaussians[parent].clone();
        let scale = g.scale();
        let axis_id = scale.imax();
        let axis = g.unit_rotation().to_rotation_matrix().into_inner().column(axis_id).into_owned();
        let offset = axis * (0.5 * scale[axis_id]);
        let mut child = g.clone();
        child.set_scale(scale / SPLIT_SCALE_DIVISOR);
        child.set_opacity(split_child_opacity(g.opacity()));
        let mut second = child.clone();
        child.center = g.center + offset;
        second.center = g.center - offset;
        scene.gaussians[parent] = child;
        scene.gaussians.push(second);
        scene.generation += 1;
        state = inherit_on_split(&state, parent, &[parent, scene.len() - 1]);
    }
    Ok((scene, state))
}

/// Editable Gaussians whose largest scale exceeds the given quantile of
/// editable largest scales.
pub fn select_largest(scene: &GaussianScene, state: &EditState, quantile: f64) -> Vec<usize> {
    let sizes: Vec<(usize, f64)> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter(|(i, _)| state.editable[*i])
        .map(|(i, g)| (i, g.log_scale.max()))
        .collect();
    if sizes.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = sizes.iter().map(|(_, s)| *s).collect();
    sorted.sort_by(f64::total_cmp);
    let rank = ((sorted.len() - 1) as f64 * quantile).round() as usize;
    let cut = sorted[rank];
    sizes.into_iter().filter(|(_, s)| *s > cut).map(|(i, _)| i).collect()
}
