//! Progressive multi-interval drag editing.
//!
//! A drag is split into `T` intervals. Each interval deforms the scene a
//! step closer to the targets, then runs `A` passes of render, correct and
//! optimize with a decreasing correction strength, and finally moves the
//! handles to where their tracked Gaussians ended up.

mod corrector;
mod session;

pub use corrector::{
    correct_view, BufferEntry, BufferManifest, CorrectionRequest, Corrector, CorrectorError, CorrectorHandle,
    CorrectorKind, ExternalCorrector, IdentityCorrector, MockCorrector,
};
pub use session::{EditParams, EditSession, IntervalReport, LossRecord, SessionEvent, SessionStatus, LOSS_CSV_HEADER};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deform::{DeformError, DragSpec};
use crate::mask::{render_view_mask, EditState, MaskError};
use crate::optimize::OptimizeError;
use crate::render::{Camera, RenderError};
use crate::scene::{GaussianScene, Vec3};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: String, reason: String },
    #[error("handle not visible: no selected camera sees any editable gaussian")]
    HandleNotVisible,
    #[error("cannot {action} while session is {from:?}")]
    InvalidTransition { from: SessionStatus, action: String },
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Corrector(#[from] CorrectorError),
    #[error("buffer io: {0}")]
    Io(String),
}

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> SchedulerError {
    SchedulerError::InvalidParams { field: field.to_string(), reason: reason.into() }
}

/// Correction strength per pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealSchedule {
    pub s_init: f64,
    pub s_final: f64,
    pub passes: usize,
    /// Reach `s_final` on the last pass by stepping with `(a-1)/(A-1)`.
    #[serde(rename = "anneal_inclusive")]
    pub inclusive: bool,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { s_init: 0.9, s_final: 0.45, passes: 4, inclusive: false }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.s_init) {
            return Err(invalid("anneal.s_init", "must lie in (0, 1]"));
        }
        if !unit(self.s_final) {
            return Err(invalid("anneal.s_final", "must lie in (0, 1]"));
        }
        if self.s_final > self.s_init {
            return Err(invalid("anneal.s_final", "must not exceed s_init"));
        }
        if self.passes == 0 {
            return Err(invalid("anneal.passes", "must be at least 1"));
        }
        Ok(())
    }

    /// Strength of pass `a` (1-based).
    pub fn strength(&self, a: usize) -> f64 {
        anneal_strength(self, a)
    }

    pub fn strengths(&self) -> Vec<f64> {
        (1..=self.passes).map(|a| self.strength(a)).collect()
    }
}

/// `S(a) = S_init - ((a-1)/A)(S_init - S_final)`, or `(a-1)/(A-1)` when the
/// schedule is inclusive.
pub fn anneal_strength(sched: &AnnealSchedule, a: usize) -> f64 {
    assert!(a >= 1 && a <= sched.passes, "pass {a} outside 1..={}", sched.passes);
    let denom = if sched.inclusive { sched.passes - 1 } else { sched.passes };
    if denom == 0 {
        return sched.s_init;
    }
    sched.s_init - ((a - 1) as f64 / denom as f64) * (sched.s_init - sched.s_final)
}

/// Targets for interval `u` of `t`: `p_h + (u/t)(p_t - p_h)`, exactly `p_t`
/// at `u = t`.
pub fn interval_targets(drag: &DragSpec, t: usize, u: usize) -> Vec<Vec3> {
    assert!(u >= 1 && u <= t, "interval {u} outside 1..={t}");
    (0..drag.len())
        .map(|i| {
            if u == t {
                drag.target(i)
            } else {
                let h = drag.handle(i);
                h + (drag.target(i) - h) * (u as f64 / t as f64)
            }
        })
        .collect()
}

/// Ranks cameras by the undilated mask area of the editable Gaussians and
/// returns the ids of the best `count`. Ties go to the smaller id.
pub fn select_views(
    scene: &GaussianScene,
    state: &EditState,
    cameras: &[Camera],
    count: usize,
    threshold: f64,
) -> Result<Vec<String>, SchedulerError> {
    if count > cameras.len() {
        return Err(invalid("view_count", format!("{count} views requested from {} cameras", cameras.len())));
    }
    let mut ranked = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let area = render_view_mask(scene, state, cam, threshold, 0)?.count();
        ranked.push((area, cam.id.clone()));
    }
    if ranked.iter().all(|(area, _)| *area == 0) {
        return Err(SchedulerError::HandleNotVisible);
    }
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(count).map(|(_, id)| id).collect())
}

/// Moves every handle by the mean displacement of the Gaussians it tracks.
/// Returns the new spec and the handles left in place for lack of tracked
/// Gaussians.
pub fn relocate_handles(
    spec: &DragSpec,
    state: &EditState,
    centers_before: &[Vec3],
    centers_after: &[Vec3],
) -> (DragSpec, Vec<usize>) {
    let mut out = spec.clone();
    let mut sums = vec![(Vec3::zeros(), 0usize); spec.len()];
    for (j, hs) in state.handle_of.iter().enumerate() {
        for &h in hs {
            sums[h].0 += centers_after[j] - centers_before[j];
            sums[h].1 += 1;
        }
    }
    let mut unmoved = Vec::new();
    for (i, (sum, n)) in sums.into_iter().enumerate() {
        if n == 0 {
            log::warn!("handle {i} tracks no gaussians; left in place");
            unmoved.push(i);
            continue;
        }
        out.set_handle(i, spec.handle(i) + sum / n as f64);
    }
    (out, unmoved)
}
