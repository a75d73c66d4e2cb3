//! Drag deformation of a Gaussian scene.
//!
//! Handles capture the Gaussians inside a sphere of radius `tau`. Every
//! handle gets a translation (target minus handle) and a rotation estimated
//! from the displacement of its nearest neighbouring handles. Captured
//! Gaussians then blend the transforms of their nearest handles with linear
//! inverse-square-distance weights, and the deformed copies are pasted next to
//! the originals, which are dimmed.

use std::collections::HashMap;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{GaussianScene, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum DeformError {
    #[error("invalid drag spec at `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("no gaussians captured by any handle")]
    NothingCaptured,
    #[error("degenerate direction: zero-length vector")]
    DegenerateDirection,
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> DeformError {
    DeformError::InvalidSpec { field: field.into(), reason: reason.into() }
}

fn default_k() -> usize {
    2
}

/// User drag input: paired handle/target points and per-handle capture radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DragSpec {
    pub handles: Vec<[f64; 3]>,
    pub targets: Vec<[f64; 3]>,
    pub radius: Vec<f64>,
    #[serde(default = "default_k", rename = "k")]
    pub k_neighbors: usize,
}

impl DragSpec {
    pub fn new(handles: Vec<Vec3>, targets: Vec<Vec3>, radius: Vec<f64>) -> Self {
        Self {
            handles: handles.iter().map(|p| [p.x, p.y, p.z]).collect(),
            targets: targets.iter().map(|p| [p.x, p.y, p.z]).collect(),
            radius,
            k_neighbors: 2,
        }
    }

    pub fn len(&self) -> usize {
        self.handles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handles.is_empty()
    }

    pub fn handle(&self, i: usize) -> Vec3 {
        Vector3::from(self.handles[i])
    }

    pub fn target(&self, i: usize) -> Vec3 {
        Vector3::from(self.targets[i])
    }

    pub fn set_handle(&mut self, i: usize, p: Vec3) {
        self.handles[i] = [p.x, p.y, p.z];
    }

    /// Checks counts, radii and finiteness; errors name the offending field.
    pub fn validate(&self) -> Result<(), DeformError> {
        if self.handles.is_empty() {
            return Err(invalid("handles", "at least one handle is required"));
        }
        if self.targets.len() != self.handles.len() {
            return Err(invalid(
                "targets",
                format!("{} targets for {} handles", self.targets.len(), self.handles.len()),
            ));
        }
        if self.radius.len() != self.handles.len() {
            return Err(invalid("radius", format!("{} radii for {} handles", self.radius.len(), self.handles.len())));
        }
        for (i, r) in self.radius.iter().enumerate() {
            if !(r.is_finite() && *r > 0.0) {
                return Err(invalid(format!("radius[{i}]"), "must be positive"));
            }
        }
        for (name, pts) in [("handles", &self.handles), ("targets", &self.targets)] {
            for (i, p) in pts.iter().enumerate() {
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(format!("{name}[{i}]"), "must be finite"));
                }
            }
        }
        if self.k_neighbors == 0 {
            return Err(invalid("k", "must be at least 1"));
        }
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                if self.handle(i) == self.handle(j) {
                    return Err(invalid(format!("handles[{j}]"), format!("duplicates handles[{i}]")));
                }
            }
        }
        Ok(())
    }
}

/// Per-handle rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandleTransform {
    pub translation: Vec3,
    pub rotation: UnitQuaternion<f64>,
}

/// Which Gaussians each handle captured.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    pub per_handle: Vec<Vec<usize>>,
    /// Sorted, deduplicated union of `per_handle`.
    pub union: Vec<usize>,
}

impl Assignment {
    pub fn from_per_handle(per_handle: Vec<Vec<usize>>) -> Self {
        let mut union: Vec<usize> = per_handle.iter().flatten().copied().collect();
        union.sort_unstable();
        union.dedup();
        Self { per_handle, union }
    }
}

/// Scenes larger than this use a uniform grid for the capture query.
const GRID_THRESHOLD: usize = 100_000;

pub fn assign_handles(scene: &GaussianScene, spec: &DragSpec) -> Result<Assignment, DeformError> {
    spec.validate()?;
    let per_handle = if scene.len() > GRID_THRESHOLD {
        assign_with_grid(scene, spec)
    } else {
        (0..spec.len())
            .map(|i| {
                let (p, r2) = (spec.handle(i), spec.radius[i] * spec.radius[i]);
                scene
                    .gaussians
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| (g.center - p).norm_squared() <= r2)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect()
    };
    let assignment = Assignment::from_per_handle(per_handle);
    if assignment.union.is_empty() {
        return Err(DeformError::NothingCaptured);
    }
    Ok(assignment)
}

fn assign_with_grid(scene: &GaussianScene, spec: &DragSpec) -> Vec<Vec<usize>> {
    let cell = spec.radius.iter().cloned().fold(0.0, f64::max);
    let key = |p: &Vec3| -> [i64; 3] { [0, 1, 2].map(|k| (p[k] / cell).floor() as i64) };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (j, g) in scene.gaussians.iter().enumerate() {
        grid.entry(key(&g.center)).or_default().push(j);
    }
    (0..spec.len())
        .map(|i| {
            let (p, r2) = (spec.handle(i), spec.radius[i] * spec.radius[i]);
            let c = key(&p);
            let mut hits = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(ids) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            hits.extend(
                                ids.iter().copied().filter(|&j| (scene.gaussians[j].center - p).norm_squared() <= r2),
                            );
                        }
                    }
                }
            }
            hits.sort_unstable();
            hits
        })
        .collect()
}

/// Shortest-arc rotation taking the direction of `vh` onto the direction of `vt`.
///
/// Antiparallel inputs rotate by π about `vh × e`, where `e` is the
/// coordinate axis least aligned with `vh`.
pub fn pairwise_rotation(vh: &Vec3, vt: &Vec3) -> Result<UnitQuaternion<f64>, DeformError> {
    let (nh, nt) = (vh.norm(), vt.norm());
    if !(nh > 0.0 && nt > 0.0) {
        return Err(DeformError::DegenerateDirection);
    }
    let a = vh / nh;
    let b = vt / nt;
    let half = a + b;
    let half_norm = half.norm();
    if half_norm < 1e-9 {
        let least = a.iamin();
        let axis = a.cross(&Vector3::ith(least, 1.0)).normalize();
        return Ok(UnitQuaternion::new_unchecked(Quaternion::from_parts(0.0, axis)));
    }
    // The half-way vector keeps precision near the antiparallel limit where
    // `1 + a·b` cancels.
    let h = half / half_norm;
    Ok(UnitQuaternion::new_normalize(Quaternion::from_parts(a.dot(&h), a.cross(&h))))
}

/// Normalized weighted sum of quaternions after flipping every summand into
/// the hemisphere of the first.
pub fn blend_quaternions(items: &[(f64, UnitQuaternion<f64>)]) -> UnitQuaternion<f64> {
    let Some((_, first)) = items.first() else {
        return UnitQuaternion::identity();
    };
    let mut acc = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for (w, q) in items {
        let q = q.into_inner();
        let sign = if q.dot(first.quaternion()) < 0.0 { -1.0 } else { 1.0 };
        acc += q * (w * sign);
    }
    if acc.norm() == 0.0 {
        return *first;
    }
    UnitQuaternion::new_normalize(acc)
}

/// Indices of the `k` points closest to `p`, nearest first, ties by index.
fn nearest(points: &[Vec3], p: &Vec3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, q)| (i, (p - q).norm_squared()))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

/// Linear inverse-square-distance weights over a neighbour set.
///
/// `w_k = 1 - d_k² / Σ_j d_j²`. With one neighbour the formula degenerates to
/// zero, so that neighbour gets full weight. For more than two neighbours the
/// raw weights sum to `K - 1` and are renormalized.
fn neighbour_weights(sq_dists: &[f64]) -> Vec<f64> {
    match sq_dists.len() {
        0 => Vec::new(),
        1 => vec![1.0],
        n => {
            let total: f64 = sq_dists.iter().sum();
            let raw = sq_dists.iter().map(|d| 1.0 - d / total);
            if n == 2 {
                raw.collect()
            } else {
                let norm = (n - 1) as f64;
                raw.map(|w| w / norm).collect()
            }
        }
    }
}

pub fn handle_transforms(spec: &DragSpec) -> Result<Vec<HandleTransform>, DeformError> {
    spec.validate()?;
    let n = spec.len();
    let handles: Vec<Vec3> = (0..n).map(|i| spec.handle(i)).collect();
    let targets: Vec<Vec3> = (0..n).map(|i| spec.target(i)).collect();
    let k = spec.k_neighbors.min(n - 1);

    (0..n)
        .map(|i| {
            let translation = targets[i] - handles[i];
            if k == 0 {
                return Ok(HandleTransform { translation, rotation: UnitQuaternion::identity() });
            }
            let near = nearest(&handles, &handles[i], k, Some(i));
            let weights = neighbour_weights(&near.iter().map(|(_, d)| *d).collect::<Vec<_>>());
            let parts = near
                .iter()
                .zip(weights)
                .map(|(&(j, _), w)| {
                    pairwise_rotation(&(handles[j] - handles[i]), &(targets[j] - targets[i])).map(|q| (w, q))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let rotation = if parts.len() == 1 { parts[0].1 } else { blend_quaternions(&parts) };
            Ok(HandleTransform { translation, rotation })
        })
        .collect()
}

/// Deformed pose for one captured Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformedPose {
    pub index: usize,
    pub center: Vec3,
    pub rotation: Quaternion<f64>,
}

/// Blends handle transforms onto every Gaussian in the assignment union.
pub fn interpolate_deformation(
    scene: &GaussianScene,
    assignment: &Assignment,
    transforms: &[HandleTransform],
    spec: &DragSpec,
) -> Vec<DeformedPose> {
    let handles: Vec<Vec3> = (0..spec.len()).map(|i| spec.handle(i)).collect();
    let k = spec.k_neighbors.min(handles.len());
    assignment
        .union
        .iter()
        .map(|&index| {
            let g = &scene.gaussians[index];
            let near = nearest(&handles, &g.center, k, None);
            let weights = neighbour_weights(&near.iter().map(|(_, d)| *d).collect::<Vec<_>>());
            let mut center = g.center;
            for (&(h, _), w) in near.iter().zip(&weights) {
                center += transforms[h].translation * *w;
            }
            let rotation = if handles.len() == 1 {
                g.rotation
            } else {
                let parts: Vec<_> =
                    near.iter().zip(&weights).map(|(&(h, _), &w)| (w, transforms[h].rotation)).collect();
                let delta = if parts.len() == 1 { parts[0].1 } else { blend_quaternions(&parts) };
                delta.into_inner() * g.rotation
            };
            DeformedPose { index, center, rotation }
        })
        .collect()
}

/// Appends deformed copies of the captured Gaussians and dims the originals.
///
/// Returns the new scene and the assignment rewritten to the copies, along
/// with the source index of every appended copy (in append order).
pub fn apply_copy_paste(
    scene: &GaussianScene,
    assignment: &Assignment,
    deformed: &[DeformedPose],
    opacity_factor: f64,
) -> (GaussianScene, Assignment, Vec<usize>) {
    assert!(opacity_factor > 0.0 && opacity_factor <= 1.0, "opacity_factor must lie in (0, 1]");
    let mut out = scene.clone();
    let base = scene.len();
    let mut copy_of = HashMap::with_capacity(deformed.len());
    let mut sources = Vec::with_capacity(deformed.len());
    for (offset, pose) in deformed.iter().enumerate() {
        let mut copy = scene.gaussians[pose.index].clone();
        copy.center = pose.center;
        copy.rotation = pose.rotation;
        out.gaussians.push(copy);
        copy_of.insert(pose.index, base + offset);
        sources.push(pose.index);
    }
    for pose in deformed {
        if opacity_factor != 1.0 {
            let g = &mut out.gaussians[pose.index];
            let dimmed = g.opacity() * opacity_factor;
            g.set_opacity(dimmed);
        }
    }
    out.generation += 1;
    let per_handle = assignment.per_handle.iter().map(|ids| ids.iter().map(|j| copy_of[j]).collect()).collect();
    (out, Assignment::from_per_handle(per_handle), sources)
}

/// Deformation result for one drag step.
#[derive(Debug, Clone)]
pub struct DragResult {
    pub scene: GaussianScene,
    /// Assignment before the copy (indices of the originals).
    pub captured: Assignment,
    /// Assignment after the copy (indices of the pasted copies).
    pub assignment: Assignment,
    /// Source index of every appended copy.
    pub sources: Vec<usize>,
}

/// Assign, transform, interpolate and paste in one call.
pub fn drag(scene: &GaussianScene, spec: &DragSpec, opacity_factor: f64) -> Result<DragResult, DeformError> {
    let captured = assign_handles(scene, spec)?;
    let transforms = handle_transforms(spec)?;
    let deformed = interpolate_deformation(scene, &captured, &transforms, spec);
    let (scene, assignment, sources) = apply_copy_paste(scene, &captured, &deformed, opacity_factor);
    Ok(DragResult { scene, captured, assignment, sources })
}
