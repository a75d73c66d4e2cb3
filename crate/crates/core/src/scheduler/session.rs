//! Edit session: the interval state machine and one interval's work.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::corrector::{correct_view, BufferEntry, BufferManifest, CorrectionRequest, Corrector};
use super::{interval_targets, invalid, relocate_handles, select_views, AnnealSchedule, SchedulerError};
use crate::deform::{apply_copy_paste, assign_handles, handle_transforms, interpolate_deformation, DragSpec};
use crate::deform::{Assignment, DeformError};
use crate::image::{Mask2D, RgbImage};
use crate::loss::{LossTerms, LossWeights, Perceptual, ViewTarget};
use crate::mask::{inherit_on_copy_paste, init_edit_state, render_view_mask, EditState, MaskParams};
use crate::optimize::{accumulate_view_grad, select_largest, split_gaussians, Adam};
use crate::render::raster::{render_rgb_frame, splat_colors};
use crate::render::{rasterize_rgb, Camera, Frame, ParamGrad};
use crate::scene::{GaussianScene, Vec3};

pub const LOSS_CSV_HEADER: &str = "interval,pass,view_id,total,l1,ssim,perc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    Idle,
    RunningInterval,
    AwaitingUser,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEvent {
    Begin,
    Finish,
    FinishLast,
    Fail,
    Commit,
    Abort,
}

impl SessionStatus {
    pub fn apply(self, event: SessionEvent) -> Result<SessionStatus, SchedulerError> {
        use SessionEvent as E;
        use SessionStatus as S;
        match (self, event) {
            (S::Idle | S::AwaitingUser, E::Begin) => Ok(S::RunningInterval),
            (S::RunningInterval, E::Finish | E::Fail) => Ok(S::AwaitingUser),
            (S::RunningInterval, E::FinishLast) => Ok(S::Committed),
            (S::AwaitingUser, E::Commit) => Ok(S::Committed),
            (S::AwaitingUser, E::Abort) => Ok(S::Aborted),
            (from, e) => Err(SchedulerError::InvalidTransition { from, action: format!("{e:?}").to_lowercase() }),
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, SessionStatus::Committed | SessionStatus::Aborted)
    }
}

/// Every tunable of the interval pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditParams {
    pub intervals: usize,
    pub anneal: AnnealSchedule,
    pub view_count: usize,
    pub weights: LossWeights,
    pub perceptual: Perceptual,
    pub opacity_factor: f64,
    pub mask: MaskParams,
    pub steps_per_pass: usize,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub background: [f64; 3],
    /// Split editable Gaussians above this quantile of editable scale once
    /// per interval; `None` disables splitting.
    pub split_quantile: Option<f64>,
    /// Concurrent corrector calls per pass.
    pub fan_out: usize,
}

impl Default for EditParams {
    fn default() -> Self {
        Self {
            intervals: 5,
            anneal: AnnealSchedule::default(),
            view_count: 50,
            weights: LossWeights::default(),
            perceptual: Perceptual::L1,
            opacity_factor: 0.1,
            mask: MaskParams::default(),
            steps_per_pass: 30,
            lr_color: 0.0125,
            lr_opacity: 0.05,
            background: [0.0; 3],
            split_quantile: Some(0.99),
            fan_out: 4,
        }
    }
}

impl EditParams {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.intervals == 0 {
            return Err(invalid("intervals", "must be at least 1"));
        }
        self.anneal.validate()?;
        if self.view_count == 0 {
            return Err(invalid("view_count", "must be at least 1"));
        }
        let w = &self.weights;
        for (field, v) in [
            ("weights.lambda_1", w.lambda_1),
            ("weights.lambda_ssim", w.lambda_ssim),
            ("weights.lambda_perc", w.lambda_perc),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, "must be finite and non-negative"));
            }
        }
        if !(self.opacity_factor > 0.0 && self.opacity_factor <= 1.0) {
            return Err(invalid("opacity_factor", "must lie in (0, 1]"));
        }
        if !(self.mask.threshold > 0.0 && self.mask.threshold < 1.0) {
            return Err(invalid("mask.threshold", "must lie in (0, 1)"));
        }
        for (field, v) in [("lr_color", self.lr_color), ("lr_opacity", self.lr_opacity)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, "must be finite and non-negative"));
            }
        }
        if let Some(q) = self.split_quantile {
            if !(0.0..=1.0).contains(&q) {
                return Err(invalid("split_quantile", "must lie in [0, 1]"));
            }
        }
        if self.fan_out == 0 {
            return Err(invalid("fan_out", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub interval: usize,
    pub pass: usize,
    pub terms: LossTerms,
}

impl LossRecord {
    pub fn csv_line(&self, view_id: &str) -> String {
        let t = &self.terms;
        format!("{},{},{},{},{},{},{}", self.interval, self.pass, view_id, t.total, t.l1, t.ssim, t.perc)
    }
}

/// Outcome of one interval.
#[derive(Debug, Clone)]
pub struct IntervalReport {
    pub interval: usize,
    pub strengths: Vec<f64>,
    /// Gaussians captured by the interval's drag step.
    pub captured: usize,
    /// Loss of the last optimizer step of every pass, per view (in view
    /// order).
    pub losses: Vec<Vec<LossRecord>>,
    /// Renders of the selected views after optimization.
    pub renders: Vec<RgbImage>,
    pub masks: Vec<Mask2D>,
    pub corrected: Vec<RgbImage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditSession {
    /// Current drag; handles move with relocation, targets stay put.
    pub drag: DragSpec,
    /// Handles as given at session start; the interval schedule follows them.
    pub start_handles: Vec<[f64; 3]>,
    pub params: EditParams,
    pub current: usize,
    pub status: SessionStatus,
    pub views: Vec<String>,
    pub buffer: Vec<BufferEntry>,
    pub last_error: Option<String>,
    /// Where buffer images are written; in memory only when unset.
    pub buffer_dir: Option<PathBuf>,
    /// Gaussians already used as copy sources (the dimmed originals). They
    /// are never captured again.
    #[serde(default)]
    pub retired: Vec<bool>,
    #[serde(skip)]
    cameras: Vec<Camera>,
    #[serde(skip)]
    originals: Vec<RgbImage>,
}

impl EditSession {
    /// Captures the drag region, selects views and renders the originals.
    /// Returns the session with the scene's initial edit state.
    pub fn start(
        scene: &GaussianScene,
        cameras: &[Camera],
        drag: DragSpec,
        params: EditParams,
        buffer_dir: Option<PathBuf>,
    ) -> Result<(EditSession, EditState), SchedulerError> {
        params.validate()?;
        if cameras.is_empty() {
            return Err(invalid("cameras", "at least one camera is required"));
        }
        let assignment = assign_handles(scene, &drag)?;
        let state = init_edit_state(scene, &assignment);
        let count = params.view_count.min(cameras.len());
        let views = select_views(scene, &state, cameras, count, params.mask.threshold)?;
        let mut session = EditSession {
            start_handles: drag.handles.clone(),
            drag,
            params,
            current: 0,
            status: SessionStatus::Idle,
            views,
            buffer: Vec::new(),
            last_error: None,
            buffer_dir,
            retired: vec![false; scene.len()],
            cameras: Vec::new(),
            originals: Vec::new(),
        };
        session.attach(scene, cameras)?;
        let originals = session.originals.clone();
        session.buffer = session.store_buffer(0, &originals)?;
        Ok((session, state))
    }

    /// Re-binds selected cameras and re-renders the original views, e.g.
    /// after deserializing a saved session. `original` is the scene the
    /// session started from.
    pub fn attach(&mut self, original: &GaussianScene, cameras: &[Camera]) -> Result<(), SchedulerError> {
        self.cameras = self
            .views
            .iter()
            .map(|id| {
                cameras
                    .iter()
                    .find(|c| &c.id == id)
                    .cloned()
                    .ok_or_else(|| invalid("views", format!("camera `{id}` not found")))
            })
            .collect::<Result<_, _>>()?;
        self.originals = self.cameras.iter().map(|c| rasterize_rgb(original, c, self.params.background)).collect();
        Ok(())
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn originals(&self) -> &[RgbImage] {
        &self.originals
    }

    pub fn intervals(&self) -> usize {
        self.params.intervals
    }

    fn transition(&mut self, event: SessionEvent) -> Result<(), SchedulerError> {
        self.status = self.status.apply(event)?;
        Ok(())
    }

    pub fn commit(&mut self) -> Result<(), SchedulerError> {
        self.transition(SessionEvent::Commit)
    }

    pub fn abort(&mut self) -> Result<(), SchedulerError> {
        self.transition(SessionEvent::Abort)
    }

    /// Stop between intervals: the scene stays at the last completed one.
    pub fn stop(&self) -> Result<(), SchedulerError> {
        match self.status {
            SessionStatus::Idle | SessionStatus::AwaitingUser => Ok(()),
            from => Err(SchedulerError::InvalidTransition { from, action: "stop".into() }),
        }
    }

    fn store_buffer(&self, interval: usize, images: &[RgbImage]) -> Result<Vec<BufferEntry>, SchedulerError> {
        let mut entries = Vec::with_capacity(images.len());
        for (id, img) in self.views.iter().zip(images) {
            let path = match &self.buffer_dir {
                Some(dir) => {
                    let dir = dir.join(format!("interval_{interval}"));
                    std::fs::create_dir_all(&dir).map_err(|e| SchedulerError::Io(e.to_string()))?;
                    let path = dir.join(format!("{id}.png"));
                    img.save_png(&path).map_err(|e| SchedulerError::Io(e.to_string()))?;
                    path.to_string_lossy().into_owned()
                }
                None => format!("mem://interval_{interval}/{id}"),
            };
            entries.push(BufferEntry { view_id: id.clone(), interval, path });
        }
        Ok(entries)
    }

    fn correct_all(
        &self,
        corrector: &dyn Corrector,
        renders: &[RgbImage],
        strength: f64,
        interval: usize,
        pass: usize,
    ) -> Result<Vec<RgbImage>, SchedulerError> {
        let request =
            |i: usize| CorrectionRequest { image: &renders[i], strength, view_id: &self.views[i], interval, pass };
        let mut out = Vec::with_capacity(renders.len());
        if self.params.fan_out == 1 {
            for i in 0..renders.len() {
                out.push(correct_view(corrector, &request(i))?);
            }
            return Ok(out);
        }
        let ids: Vec<usize> = (0..renders.len()).collect();
        for chunk in ids.chunks(self.params.fan_out) {
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> =
                    chunk.iter().map(|&i| s.spawn(move || correct_view(corrector, &request(i)))).collect();
                handles.into_iter().map(|h| h.join().expect("corrector thread panicked")).collect()
            });
            for r in results {
                out.push(r?);
            }
        }
        Ok(out)
    }

    /// Runs the next interval. On failure the scene and state are restored
    /// to their values at interval start and the session waits for the user.
    pub fn run_interval(
        &mut self,
        scene: &mut GaussianScene,
        state: &mut EditState,
        corrector: &dyn Corrector,
    ) -> Result<IntervalReport, SchedulerError> {
        if self.current >= self.params.intervals {
            return Err(SchedulerError::InvalidTransition { from: self.status, action: "run another interval".into() });
        }
        self.transition(SessionEvent::Begin)?;
        if self.originals.len() != self.views.len() {
            self.status = SessionStatus::AwaitingUser;
            return Err(invalid("views", "session is not attached to its cameras"));
        }
        let snapshot = (scene.clone(), state.clone(), self.drag.clone(), self.retired.clone(), self.buffer.len());
        match self.interval_body(scene, state, corrector) {
            Ok(report) => {
                self.last_error = None;
                let last = self.current == self.params.intervals;
                self.transition(if last { SessionEvent::FinishLast } else { SessionEvent::Finish })?;
                Ok(report)
            }
            Err(e) => {
                log::error!("interval {} failed: {e}", self.current + 1);
                let buffer_len;
                (*scene, *state, self.drag, self.retired, buffer_len) = snapshot;
                self.buffer.truncate(buffer_len);
                self.last_error = Some(e.to_string());
                self.transition(SessionEvent::Fail)?;
                Err(e)
            }
        }
    }

    fn interval_body(
        &mut self,
        scene: &mut GaussianScene,
        state: &mut EditState,
        corrector: &dyn Corrector,
    ) -> Result<IntervalReport, SchedulerError> {
        let p = self.params.clone();
        let u = self.current + 1;
        state.check(scene)?;

        let schedule = DragSpec { handles: self.start_handles.clone(), ..self.drag.clone() };
        let targets = interval_targets(&schedule, p.intervals, u);
        let step = DragSpec::new(
            (0..self.drag.len()).map(|i| self.drag.handle(i)).collect(),
            targets,
            self.drag.radius.clone(),
        );
        let step = DragSpec { k_neighbors: self.drag.k_neighbors, ..step };

        self.retired.resize(scene.len(), false);
        let captured = assign_handles(scene, &step)?;
        let captured = Assignment::from_per_handle(
            captured
                .per_handle
                .into_iter()
                .map(|ids| ids.into_iter().filter(|&i| !self.retired[i]).collect())
                .collect(),
        );
        if captured.union.is_empty() {
            return Err(DeformError::NothingCaptured.into());
        }
        let transforms = handle_transforms(&step)?;
        let deformed = interpolate_deformation(scene, &captured, &transforms, &step);
        state.merge_assignment(&captured);
        let first_new = scene.len();
        let (mut next, _, sources) = apply_copy_paste(scene, &captured, &deformed, p.opacity_factor);
        let mut next_state = inherit_on_copy_paste(state, &sources, first_new);
        let mut origin: Vec<Vec3> = scene.centers();
        origin.extend(sources.iter().map(|&s| scene.gaussians[s].center));
        let mut retired = self.retired.clone();
        retired.resize(next.len(), false);
        for &s in &sources {
            retired[s] = true;
        }

        if let Some(q) = p.split_quantile {
            let parents = select_largest(&next, &next_state, q);
            if !parents.is_empty() {
                (next, next_state) = split_gaussians(&next, &next_state, &parents)?;
                let inherited: Vec<Vec3> = parents.iter().map(|&i| origin[i]).collect();
                origin.extend(inherited);
                let inherited: Vec<bool> = parents.iter().map(|&i| retired[i]).collect();
                retired.extend(inherited);
            }
        }
        *scene = next;
        *state = next_state;
        self.retired = retired;

        let masks: Vec<Mask2D> = self
            .cameras
            .iter()
            .map(|c| render_view_mask(scene, state, c, p.mask.threshold, p.mask.dilation_for_width(c.width)))
            .collect::<Result<_, _>>()?;

        let mut frames: Vec<Frame> = self.cameras.iter().map(|c| Frame::new(scene, c)).collect();
        let mut adam = Adam::new(scene.len());
        let mut losses = vec![Vec::new(); self.views.len()];
        let mut corrected = Vec::new();
        let strengths = p.anneal.strengths();
        for (a, &strength) in strengths.iter().enumerate() {
            let pass = a + 1;
            let colors = splat_colors(scene);
            let renders: Vec<RgbImage> = frames.iter().map(|f| render_rgb_frame(f, &colors, p.background)).collect();
            corrected = self.correct_all(corrector, &renders, strength, u, pass)?;
            let targets: Vec<ViewTarget> = self
                .views
                .iter()
                .zip(&corrected)
                .zip(&masks)
                .zip(&self.originals)
                .map(|(((id, edited), mask), original)| ViewTarget {
                    view_id: id.clone(),
                    original: original.clone(),
                    edited: edited.clone(),
                    mask: mask.clone(),
                })
                .collect();
            let mut last_terms = vec![LossTerms::default(); targets.len()];
            for _ in 0..p.steps_per_pass {
                let mut total = vec![ParamGrad::default(); scene.len()];
                let colors = splat_colors(scene);
                for (v, (frame, target)) in frames.iter().zip(&targets).enumerate() {
                    last_terms[v] = accumulate_view_grad(
                        scene,
                        frame,
                        &colors,
                        target,
                        &p.weights,
                        p.perceptual,
                        p.background,
                        &mut total,
                    )?;
                }
                adam.step(scene, &total, &state.editable, p.lr_color, p.lr_opacity)?;
                for f in &mut frames {
                    f.refresh_opacity(scene);
                }
            }
            for (v, terms) in last_terms.into_iter().enumerate() {
                losses[v].push(LossRecord { interval: u, pass, terms });
            }
        }

        let (relocated, _) = relocate_handles(&self.drag, state, &origin, &scene.centers());
        self.drag = relocated;
        if let Ok(region) = assign_handles(scene, &self.drag) {
            for i in region.union {
                state.editable[i] = true;
            }
        }

        let entries = self.store_buffer(u, &corrected)?;
        self.buffer.extend(entries);
        corrector.push_buffer(&BufferManifest::new(self.buffer.clone()))?;
        self.current = u;

        let colors = splat_colors(scene);
        let renders = frames.iter().map(|f| render_rgb_frame(f, &colors, p.background)).collect();
        Ok(IntervalReport { interval: u, strengths, captured: captured.union.len(), losses, renders, masks, corrected })
    }
}
