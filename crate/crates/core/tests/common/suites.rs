//! Criterion suites shared by the integration tests and the acceptance
//! runner. Each returns a one-line summary or the first failure.

use std::collections::HashSet;

use gsdrag_core::deform::{
    apply_copy_paste, assign_handles, drag, handle_transforms, interpolate_deformation, pairwise_rotation, Assignment,
};
use gsdrag_core::image::{DepthMap, Mask2D, RgbImage};
use gsdrag_core::loss::{loss_eval, masked_psnr, masked_ssim, LossWeights, Perceptual, ViewTarget};
use gsdrag_core::mask::{inherit_on_copy_paste, init_edit_state, render_view_mask, EditState, MaskParams};
use gsdrag_core::optimize::{grad_color_opacity, split_gaussians, Adam};
use gsdrag_core::ply::{parse_ply, to_ply_bytes};
use gsdrag_core::render::{rasterize_coverage, rasterize_rgb};
use gsdrag_core::scheduler::{
    interval_targets, relocate_handles, AnnealSchedule, EditParams, EditSession, IdentityCorrector,
};
use gsdrag_core::synthetic::{fixture_drag, fixture_scene, origin_camera, random_scene, ring_cameras};
use gsdrag_core::{DragSpec, Gaussian, GaussianScene, HandleTransform, Vec3};
use nalgebra::{Quaternion, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle;

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn point(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    Vec3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half))
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = point(rng, 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Rotates `v` by the sandwich product `q (0, v) q*`.
fn sandwich(q: &Quaternion<f64>, v: &Vec3) -> Vec3 {
    let p = Quaternion::new(0.0, v.x, v.y, v.z);
    let r = q * p * q.conjugate();
    Vec3::new(r.i, r.j, r.k)
}

fn basis(h: usize) -> Vec3 {
    let mut v = Vec3::zeros();
    v[h] = 1.0;
    v
}

fn single(center: Vec3) -> GaussianScene {
    GaussianScene::new(vec![Gaussian::new(center, Vec3::repeat(0.1), UnitQuaternion::identity(), 0.8, [0.5; 3])], 0)
}

fn pure_translations(ts: &[Vec3]) -> Vec<HandleTransform> {
    ts.iter().map(|t| HandleTransform { translation: *t, rotation: UnitQuaternion::identity() }).collect()
}

fn interpolate_one(center: Vec3, handles: &[Vec3], transforms: &[HandleTransform]) -> (Vec3, Quaternion<f64>) {
    let spec = DragSpec::new(handles.to_vec(), handles.to_vec(), vec![100.0; handles.len()]);
    let pose = interpolate_deformation(&single(center), &Assignment::from_per_handle(vec![vec![0]]), transforms, &spec);
    (pose[0].center, pose[0].rotation)
}

pub fn deformation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // Partition of unity with K = 2: each handle translates along its own
    // axis, so the displacement components are the weights.
    let mut worst_sum = 0.0f64;
    let mut worst_weight = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.random_range(2..=3);
        let handles: Vec<Vec3> = (0..n).map(|_| point(&mut rng, 2.0)).collect();
        let mu = point(&mut rng, 2.0);
        let transforms = pure_translations(&(0..n).map(basis).collect::<Vec<_>>());
        let (center, _) = interpolate_one(mu, &handles, &transforms);
        let w = center - mu;
        worst_sum = worst_sum.max((w.sum() - 1.0).abs());

        let mut d: Vec<(usize, f64)> = handles.iter().enumerate().map(|(i, h)| (i, (mu - h).norm_squared())).collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1));
        let total = d[0].1 + d[1].1;
        let mut want = [0.0; 3];
        want[d[0].0] = 1.0 - d[0].1 / total;
        want[d[1].0] = 1.0 - d[1].1 / total;
        for k in 0..3 {
            worst_weight = worst_weight.max((w[k] - want[k]).abs());
        }
    }
    ensure(worst_sum <= 1e-12, || format!("partition of unity off by {worst_sum:e}"))?;
    ensure(worst_weight <= 1e-12, || format!("weights differ from direct evaluation by {worst_weight:e}"))?;

    // Single handle: exact rigid translation, rotation untouched.
    let scene = random_scene(300, 5);
    let h = scene.gaussians[0].center;
    let t = Vec3::new(1.0, 2.0, 3.0);
    let spec = DragSpec::new(vec![h], vec![h + t], vec![0.6]);
    let out = drag(&scene, &spec, 0.1).map_err(|e| e.to_string())?;
    ensure(!out.sources.is_empty(), || "nothing captured".into())?;
    for (k, &src) in out.sources.iter().enumerate() {
        let copy = &out.scene.gaussians[scene.len() + k];
        let orig = &scene.gaussians[src];
        ensure(copy.center == orig.center + t, || format!("copy of {src} moved to {:?}", copy.center))?;
        ensure(copy.rotation == orig.rotation, || format!("copy of {src} rotated"))?;
    }
    let captured: HashSet<usize> = out.sources.iter().copied().collect();
    for (i, g) in scene.gaussians.iter().enumerate() {
        let now = &out.scene.gaussians[i];
        if captured.contains(&i) {
            ensure((now.opacity() - 0.1 * g.opacity()).abs() < 1e-12, || format!("original {i} not dimmed"))?;
        } else {
            ensure(now == g, || format!("uncaptured Gaussian {i} changed"))?;
        }
    }

    // Worked examples.
    let single_spec = DragSpec::new(vec![Vec3::zeros()], vec![t], vec![1.0]);
    let tr = handle_transforms(&single_spec).map_err(|e| e.to_string())?;
    ensure(tr[0].translation == t && tr[0].rotation == UnitQuaternion::identity(), || format!("{tr:?}"))?;
    let (c, q) = interpolate_one(Vec3::new(0.1, 0.0, 0.0), &[Vec3::zeros()], &pure_translations(&[Vec3::x()]));
    ensure(c == Vec3::new(1.1, 0.0, 0.0) && q == Quaternion::identity(), || format!("single handle gave {c:?}"))?;

    let (c, _) = interpolate_one(
        Vec3::zeros(),
        &[Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0)],
        &pure_translations(&[Vec3::x(), Vec3::y()]),
    );
    ensure((c.x - 0.8).abs() < 1e-15 && (c.y - 0.2).abs() < 1e-15, || format!("distances 1, 2 gave weights {c:?}"))?;

    let three = DragSpec::new(
        vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0)],
        vec![Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 2.0, 0.0)],
        vec![0.5; 3],
    );
    let q0 = handle_transforms(&three).map_err(|e| e.to_string())?[0].rotation;
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let blend = Quaternion::new(half, 0.0, 0.0, half) * 0.8 + Quaternion::identity() * 0.2;
    let want = blend / blend.norm();
    ensure((q0.into_inner() - want).norm() < 1e-12, || format!("blended handle rotation {q0:?}, want {want:?}"))?;

    let (t1, t2) = (Vec3::new(0.3, -1.0, 2.0), Vec3::new(-0.7, 0.4, 1.0));
    let ends = [Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
    let mu = Vec3::new(0.0, 0.5, -0.25);
    let (c, _) = interpolate_one(mu, &ends, &pure_translations(&[t1, t2]));
    ensure((c - (mu + 0.5 * t1 + 0.5 * t2)).norm() < 1e-15, || format!("equidistant Gaussian at {c:?}"))?;
    let spin = UnitQuaternion::from_euler_angles(0.2, -0.4, 1.1);
    let rigid = [
        HandleTransform { translation: t1, rotation: UnitQuaternion::identity() },
        HandleTransform { translation: t2, rotation: spin },
    ];
    let (c, q) = interpolate_one(ends[1], &ends, &rigid);
    ensure(c == ends[1] + t2, || format!("coincident Gaussian at {c:?}"))?;
    ensure((q - spin.into_inner()).norm() < 1e-15, || format!("coincident Gaussian rotation {q:?}"))?;

    let id = pairwise_rotation(&Vec3::x(), &Vec3::x()).map_err(|e| e.to_string())?;
    ensure(id.into_inner() == Quaternion::identity(), || format!("parallel pair gave {id:?}"))?;
    let quarter = pairwise_rotation(&Vec3::x(), &Vec3::y()).map_err(|e| e.to_string())?.into_inner();
    ensure((quarter - Quaternion::new(half, 0.0, 0.0, half)).norm() < 1e-12, || format!("x to y gave {quarter:?}"))?;
    let flip = pairwise_rotation(&Vec3::x(), &-Vec3::x()).map_err(|e| e.to_string())?.into_inner();
    ensure(flip.w == 0.0 && (sandwich(&flip, &Vec3::x()) + Vec3::x()).norm() < 1e-12, || {
        format!("antiparallel gave {flip:?}")
    })?;

    // Pairwise rotation over random pairs, a quarter of them nearly or
    // exactly antiparallel.
    let mut worst_rot = 0.0f64;
    for i in 0..10_000 {
        let a = unit(&mut rng) * rng.random_range(0.01..10.0);
        let b = match i % 8 {
            0 => -a * rng.random_range(0.1..5.0),
            1 => -a + point(&mut rng, 1.0) * 10f64.powf(rng.random_range(-9.0..-3.0)) * a.norm(),
            _ => unit(&mut rng) * rng.random_range(0.01..10.0),
        };
        let q = pairwise_rotation(&a, &b).map_err(|e| e.to_string())?.into_inner();
        let err = (sandwich(&q, &a.normalize()) - b.normalize()).norm();
        worst_rot = worst_rot.max(err);
    }
    ensure(worst_rot <= 1e-6, || format!("pairwise rotation misses by {worst_rot:e}"))?;

    // Translation equivariance on a multi-handle drag.
    let scene = fixture_scene(600, 2);
    let spec = DragSpec::new(
        vec![Vec3::new(0.0, 0.05, 0.0), Vec3::new(0.8, 0.15, 0.55), Vec3::new(-0.6, 0.35, 0.2)],
        vec![Vec3::new(0.3, -0.1, 0.1), Vec3::new(0.9, 0.0, 0.2), Vec3::new(-0.6, 0.35, 0.6)],
        vec![0.3, 0.3, 0.3],
    );
    let shift = Vec3::new(10.5, -3.25, 7.0);
    let mut moved = scene.clone();
    moved.translate(&shift);
    let mut moved_spec = spec.clone();
    for i in 0..spec.len() {
        moved_spec.handles[i] = (spec.handle(i) + shift).into();
        moved_spec.targets[i] = (spec.target(i) + shift).into();
    }
    let base = drag(&scene, &spec, 0.1).map_err(|e| e.to_string())?;
    let other = drag(&moved, &moved_spec, 0.1).map_err(|e| e.to_string())?;
    ensure(base.scene.len() == other.scene.len(), || "translated drag captured a different set".into())?;
    let mut worst_eq = 0.0f64;
    for (a, b) in base.scene.gaussians.iter().zip(&other.scene.gaussians) {
        worst_eq = worst_eq.max((a.center + shift - b.center).norm());
        worst_eq = worst_eq.max((a.rotation - b.rotation).norm());
    }
    ensure(worst_eq <= 1e-9, || format!("translation equivariance off by {worst_eq:e}"))?;

    Ok(format!(
        "partition {worst_sum:.1e}, weights {worst_weight:.1e}, rotation {worst_rot:.1e}, equivariance {worst_eq:.1e}"
    ))
}

pub fn schedule() -> Outcome {
    let sched = AnnealSchedule { s_init: 0.9, s_final: 0.5, passes: 4, inclusive: false };
    let got = sched.strengths();
    ensure(got == vec![0.9, 0.8, 0.7, 0.6], || format!("strengths {got:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_tel = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=4);
        let handles: Vec<Vec3> = (0..n).map(|_| point(&mut rng, 5.0)).collect();
        let targets: Vec<Vec3> = (0..n).map(|_| point(&mut rng, 5.0)).collect();
        let spec = DragSpec::new(handles.clone(), targets.clone(), vec![1.0; n]);
        let t = rng.random_range(1..=20);
        let mut prev = handles.clone();
        let mut sum = vec![Vec3::zeros(); n];
        for u in 1..=t {
            let cur = interval_targets(&spec, t, u);
            for i in 0..n {
                sum[i] += cur[i] - prev[i];
            }
            prev = cur;
        }
        for i in 0..n {
            worst_tel = worst_tel.max((sum[i] - (targets[i] - handles[i])).amax());
        }
    }
    ensure(worst_tel <= 1e-12, || format!("telescoping off by {worst_tel:e}"))?;

    // Relocation against an independently computed mean.
    let mut worst_rel = 0.0f64;
    for _ in 0..200 {
        let n_handles = rng.random_range(1..=3);
        let n = rng.random_range(5..60);
        let before: Vec<Vec3> = (0..n).map(|_| point(&mut rng, 3.0)).collect();
        let after: Vec<Vec3> = before.iter().map(|p| p + point(&mut rng, 1.0)).collect();
        let mut state = EditState { generation: 0, editable: vec![false; n], handle_of: vec![Vec::new(); n] };
        for j in 0..n {
            for h in 0..n_handles {
                if rng.random_bool(0.4) {
                    state.editable[j] = true;
                    state.handle_of[j].push(h);
                }
            }
        }
        let handles: Vec<Vec3> = (0..n_handles).map(|_| point(&mut rng, 3.0)).collect();
        let spec = DragSpec::new(handles.clone(), handles.clone(), vec![1.0; n_handles]);
        let (out, unmoved) = relocate_handles(&spec, &state, &before, &after);
        for h in 0..n_handles {
            let tracked: Vec<usize> = (0..n).filter(|&j| state.handle_of[j].contains(&h)).collect();
            if tracked.is_empty() {
                ensure(unmoved.contains(&h) && out.handle(h) == handles[h], || format!("empty handle {h} moved"))?;
                continue;
            }
            let m = tracked.len() as f64;
            let mean_after: Vec3 = tracked.iter().map(|&j| after[j]).sum::<Vec3>() / m;
            let mean_before: Vec3 = tracked.iter().map(|&j| before[j]).sum::<Vec3>() / m;
            worst_rel = worst_rel.max((out.handle(h) - (handles[h] + mean_after - mean_before)).amax());
        }
        ensure(out.targets == spec.targets, || "relocation changed targets".into())?;
    }
    ensure(worst_rel <= 1e-9, || format!("relocation off by {worst_rel:e}"))?;

    // A rigid first interval carries the handle to its interval target.
    let scene = fixture_scene(1500, 4);
    let full = fixture_drag(0.9);
    let step_target = interval_targets(&full, 3, 1);
    let step = DragSpec::new(vec![full.handle(0)], step_target.clone(), full.radius.clone());
    let captured = assign_handles(&scene, &step).map_err(|e| e.to_string())?;
    let transforms = handle_transforms(&step).map_err(|e| e.to_string())?;
    let poses = interpolate_deformation(&scene, &captured, &transforms, &step);
    let (moved, _, sources) = apply_copy_paste(&scene, &captured, &poses, 0.1);
    let state = inherit_on_copy_paste(&init_edit_state(&scene, &captured), &sources, scene.len());
    let mut before = moved.centers();
    for (k, &src) in sources.iter().enumerate() {
        before[scene.len() + k] = scene.gaussians[src].center;
    }
    let (relocated, _) = relocate_handles(&full, &state, &before, &moved.centers());
    let rigid_err = (relocated.handle(0) - step_target[0]).norm();
    ensure(rigid_err <= 1e-6, || format!("rigid relocation off by {rigid_err:e}"))?;

    Ok(format!("telescoping {worst_tel:.1e}, relocation {worst_rel:.1e}, rigid interval {rigid_err:.1e}"))
}

/// Random scenes for the rasterizer checks, with a few Gaussians straddling
/// or behind the near plane.
fn raster_scene(seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = rng.random_range(1..=30);
    let mut scene = random_scene(n, seed);
    for _ in 0..(seed % 3) {
        let z = rng.random_range(-0.5..0.6);
        scene.gaussians.push(Gaussian::new(
            Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), z),
            Vec3::repeat(0.05),
            UnitQuaternion::identity(),
            0.9,
            [0.9, 0.1, 0.6],
        ));
    }
    scene
}

pub fn rasterizer() -> Outcome {
    let cam = origin_camera(64, 64);
    let (mut worst_oracle, mut worst_perm, mut worst_cons) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let scene = raster_scene(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bg = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let tiled = rasterize_rgb(&scene, &cam, bg);
        let reference = oracle::render(&scene, &cam, bg, false);
        for (p, want) in reference.rgb.iter().enumerate() {
            for k in 0..3 {
                worst_oracle = worst_oracle.max((tiled.data[p * 3 + k] - want[k]).abs());
            }
        }

        let mut shuffled = scene.clone();
        shuffled.gaussians.shuffle(&mut rng);
        let other = rasterize_rgb(&shuffled, &cam, bg);
        for (a, b) in tiled.data.iter().zip(&other.data) {
            worst_perm = worst_perm.max((a - b).abs());
        }

        let (acc, trans) = rasterize_coverage(&scene, &cam);
        for (a, t) in acc.data.iter().zip(&trans.data) {
            worst_cons = worst_cons.max((a + t - 1.0).abs());
        }
    }
    ensure(worst_oracle <= 1e-5, || format!("tiled vs brute force differ by {worst_oracle:e}"))?;
    ensure(worst_perm <= 1e-6, || format!("permutation changes the image by {worst_perm:e}"))?;
    ensure(worst_cons <= 1e-6, || format!("alpha + transmittance off by {worst_cons:e}"))?;
    Ok(format!("oracle {worst_oracle:.1e}, permutation {worst_perm:.1e}, conservation {worst_cons:.1e}"))
}

fn noise(w: usize, h: usize, rng: &mut ChaCha8Rng, offset: f64) -> RgbImage {
    RgbImage { width: w, height: h, data: (0..w * h * 3).map(|_| rng.random_range(0.0..1.0) + offset).collect() }
}

pub fn gradients() -> Outcome {
    const H: f64 = 1e-4;
    let cam = origin_camera(32, 32);
    let bg = [0.1, 0.2, 0.3];
    let weights = LossWeights::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..20u64 {
        let scene = random_scene(5, 100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Targets sit well away from any reachable render so no L1 term
        // changes sign under the finite-difference step.
        let target = ViewTarget {
            view_id: cam.id.clone(),
            original: noise(32, 32, &mut rng, 1.5),
            edited: noise(32, 32, &mut rng, -1.5),
            mask: Mask2D {
                width: 32,
                height: 32,
                bits: (0..32 * 32).map(|p| (p % 32) + (p / 32) < 30).collect(),
                view_id: cam.id.clone(),
            },
        };
        let kind = if seed % 2 == 0 { Perceptual::L1 } else { Perceptual::MultiScaleL1 };
        let editable = vec![true; scene.len()];
        let (_, _, grads) =
            grad_color_opacity(&scene, &cam, &target, &weights, kind, &editable, bg).map_err(|e| e.to_string())?;
        let loss = |s: &GaussianScene| loss_eval(&rasterize_rgb(s, &cam, bg), &target, &weights, kind).map(|t| t.total);

        for i in 0..scene.len() {
            for param in 0..4 {
                let eval = |sign: f64| {
                    let mut s = scene.clone();
                    let g = &mut s.gaussians[i];
                    if param < 3 {
                        g.sh_dc[param] += sign * H;
                    } else {
                        let a = g.opacity();
                        g.set_opacity(a + sign * H);
                    }
                    loss(&s)
                };
                let fd = (eval(1.0).map_err(|e| e.to_string())? - eval(-1.0).map_err(|e| e.to_string())?) / (2.0 * H);
                let analytic = if param < 3 { grads[i].sh_dc[param] } else { grads[i].opacity };
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
                ensure(rel <= 1e-3, || {
                    format!("seed {seed} gaussian {i} param {param}: analytic {analytic:e} vs finite difference {fd:e}")
                })?;
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} partials, worst relative error {worst:.1e}"))
}

pub fn masks() -> Outcome {
    let scene = fixture_scene(3000, 8);
    let spec = fixture_drag(0.6);
    let out = drag(&scene, &spec, 0.1).map_err(|e| e.to_string())?;
    let state = init_edit_state(&scene, &out.captured);
    let copied = inherit_on_copy_paste(&state, &out.sources, scene.len());
    ensure(copied.editable_count() == state.editable_count() + out.sources.len(), || {
        format!(
            "copy-paste: {} editable from {} plus {} copies",
            copied.editable_count(),
            state.editable_count(),
            out.sources.len()
        )
    })?;
    let tracked = |s: &EditState| s.handle_of.iter().filter(|h| !h.is_empty()).count();
    ensure(tracked(&copied) == tracked(&state), || "copy-paste changed the number of tracked Gaussians".into())?;
    ensure(copied.handle_of[..scene.len()].iter().all(|h| h.is_empty()), || "sources kept their tracking".into())?;
    let valid = |s: &EditState, n_handles: usize| {
        s.handle_of.iter().zip(&s.editable).all(|(h, &e)| (h.is_empty() || e) && h.iter().all(|&i| i < n_handles))
    };
    ensure(valid(&copied, spec.len()), || "tracking without editable flag after copy".into())?;

    let mut work = out.scene.clone();
    work.generation = copied.generation;
    let parents: Vec<usize> =
        copied.editable.iter().enumerate().filter(|(_, &e)| e).map(|(i, _)| i).step_by(7).collect();
    let (split, after) = split_gaussians(&work, &copied, &parents).map_err(|e| e.to_string())?;
    ensure(split.len() == work.len() + parents.len(), || "split count".into())?;
    ensure(after.editable_count() == copied.editable_count() + parents.len(), || "split editable count".into())?;
    for (k, &p) in parents.iter().enumerate() {
        let child = work.len() + k;
        ensure(after.handle_of[child] == copied.handle_of[p] && after.handle_of[p] == copied.handle_of[p], || {
            format!("split child of {p} lost its tracking")
        })?;
    }
    ensure(valid(&after, spec.len()), || "tracking without editable flag after split".into())?;

    let mut dilated_checks = 0;
    for cam in ring_cameras(6, 3.0, 1.2, (64, 64)) {
        let mut prev = render_view_mask(&split, &after, &cam, 0.5, 0).map_err(|e| e.to_string())?;
        for r in 1..=6 {
            let next = render_view_mask(&split, &after, &cam, 0.5, r).map_err(|e| e.to_string())?;
            ensure(prev.bits.iter().zip(&next.bits).all(|(a, b)| !a || *b), || {
                format!("{}: radius {r} drops pixels", cam.id)
            })?;
            prev = next;
            dilated_checks += 1;
        }
    }

    // Frozen Gaussians stay bit-identical through real optimizer steps.
    let cam = &ring_cameras(4, 3.0, 1.2, (32, 32))[1];
    let original = rasterize_rgb(&scene, cam, [0.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let target = ViewTarget {
        view_id: cam.id.clone(),
        original,
        edited: noise(32, 32, &mut rng, 0.0),
        mask: render_view_mask(&split, &after, cam, 0.5, 1).map_err(|e| e.to_string())?,
    };
    let mut current = split.clone();
    let mut adam = Adam::new(current.len());
    for _ in 0..100 {
        let (_, _, grads) = grad_color_opacity(
            &current,
            cam,
            &target,
            &LossWeights::default(),
            Perceptual::L1,
            &after.editable,
            [0.0; 3],
        )
        .map_err(|e| e.to_string())?;
        adam.step(&mut current, &grads, &after.editable, 0.0125, 0.05).map_err(|e| e.to_string())?;
    }
    let mut changed_editable = 0;
    for (i, (a, b)) in split.gaussians.iter().zip(&current.gaussians).enumerate() {
        if after.editable[i] {
            changed_editable += usize::from(a != b);
            continue;
        }
        let bits = |g: &Gaussian| {
            let mut v: Vec<u64> = g.center.iter().chain(g.log_scale.iter()).map(|x| x.to_bits()).collect();
            v.extend(g.rotation.coords.iter().map(|x| x.to_bits()));
            v.extend(g.sh_dc.iter().chain(&g.sh_rest).map(|x| x.to_bits()));
            v.push(g.opacity_logit.to_bits());
            v
        };
        ensure(bits(a) == bits(b), || format!("frozen Gaussian {i} changed"))?;
    }
    ensure(changed_editable > 0, || "optimizer moved no editable Gaussian".into())?;
    Ok(format!(
        "{} copies, {} splits, {dilated_checks} dilation pairs, {} frozen Gaussians unchanged over 100 steps",
        out.sources.len(),
        parents.len(),
        after.len() - after.editable_count()
    ))
}

pub const STOCK_PLY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/stock_3dgs.ply");

/// Raw little-endian f32 rows of a binary PLY body.
fn raw_rows(bytes: &[u8], stride: usize) -> Vec<Vec<f32>> {
    let end = bytes.windows(11).position(|w| w == b"end_header\n").expect("header") + 11;
    bytes[end..]
        .chunks_exact(stride * 4)
        .map(|row| row.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        .collect()
}

pub fn formats() -> Outcome {
    let scene = fixture_scene(800, 12);
    let bytes = to_ply_bytes(&scene).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("scene.ply");
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    let loaded = gsdrag_core::ply::load_ply(&path).map_err(|e| e.to_string())?;
    let again = to_ply_bytes(&loaded).map_err(|e| e.to_string())?;
    ensure(again == bytes, || "save(load(save(scene))) differs from save(scene)".into())?;
    ensure(to_ply_bytes(&parse_ply(&again).map_err(|e| e.to_string())?).map_err(|e| e.to_string())? == bytes, || {
        "second round trip differs".into()
    })?;

    let stock_bytes = std::fs::read(STOCK_PLY).map_err(|e| format!("{STOCK_PLY}: {e}"))?;
    let stock = parse_ply(&stock_bytes).map_err(|e| e.to_string())?;
    ensure(stock.len() == 257 && stock.sh_degree == 3, || {
        format!("{} elements at degree {}", stock.len(), stock.sh_degree)
    })?;
    let rows = raw_rows(&stock_bytes, 62);
    ensure(rows.len() == stock.len(), || "row count".into())?;
    for (i, (g, raw)) in stock.gaussians.iter().zip(&rows).enumerate() {
        let alpha = g.opacity();
        ensure(alpha > 0.0 && alpha < 1.0, || format!("element {i}: opacity {alpha}"))?;
        ensure((alpha - oracle::sigmoid(raw[54] as f64)).abs() < 1e-12, || format!("element {i}: opacity activation"))?;
        let s = g.scale();
        ensure(s.iter().all(|v| v.is_finite() && *v > 0.0), || format!("element {i}: scale {s:?}"))?;
        for k in 0..3 {
            ensure((s[k] - (raw[55 + k] as f64).exp()).abs() <= 1e-12 * s[k], || {
                format!("element {i}: scale activation")
            })?;
            ensure(g.center[k] == raw[k] as f64 && g.sh_dc[k] == raw[6 + k] as f64, || {
                format!("element {i} reordered")
            })?;
        }
        ensure((g.rotation.norm() - 1.0).abs() < 1e-6, || format!("element {i}: rotation norm {}", g.rotation.norm()))?;
        let q = Quaternion::new(raw[58] as f64, raw[59] as f64, raw[60] as f64, raw[61] as f64);
        ensure((g.rotation - q / q.norm()).norm() < 1e-6, || format!("element {i}: rotation {:?}", g.rotation))?;
        ensure(g.sh_rest.len() == 45 && g.sh_rest[44] == raw[53] as f64, || format!("element {i}: sh rest"))?;
    }
    let restored = to_ply_bytes(&stock).map_err(|e| e.to_string())?;
    ensure(
        to_ply_bytes(&parse_ply(&restored).map_err(|e| e.to_string())?).map_err(|e| e.to_string())? == restored,
        || "stock checkpoint does not round-trip after re-export".into(),
    )?;

    let depth =
        DepthMap { width: 5, height: 3, depth: (0..15).map(|i| 1.0 + i as f64 * 0.5).collect(), valid: vec![true; 15] };
    let mut out = Vec::new();
    depth.write_to(&mut out).map_err(|e| e.to_string())?;
    let header: [u8; 16] = [b'G', b'S', b'D', b'D', 5, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0];
    ensure(out[..16] == header, || format!("depth header {:?}", &out[..16]))?;
    ensure(out.len() == 16 + 15 * 4 && out[16..20] == 1.0f32.to_le_bytes(), || "depth body layout".into())?;
    ensure(DepthMap::read_from(out.as_slice()).map_err(|e| e.to_string())? == depth, || "depth round trip".into())?;
    Ok(format!("fixture {} bytes round-trips, stock checkpoint {} elements", bytes.len(), stock.len()))
}

/// Identity-corrector edit of the fixture over three intervals; compares
/// pixels outside the final dilated masks against the pre-edit renders.
pub fn background() -> Outcome {
    let scene = fixture_scene(2000, 21);
    let cameras = ring_cameras(12, 3.0, 1.2, (64, 64));
    // 5 px at 64 px wide: the dilation must cover the SSIM window radius,
    // as the default 10 px does at 512 px.
    let mask = MaskParams { threshold: 0.5, dilate_px: 40 };
    let params = EditParams { intervals: 3, mask, ..EditParams::default() };
    let (mut session, mut state) =
        EditSession::start(&scene, &cameras, fixture_drag(0.6), params, None).map_err(|e| e.to_string())?;
    let mut edited = scene.clone();
    let mut last = None;
    for _ in 0..3 {
        last = Some(session.run_interval(&mut edited, &mut state, &IdentityCorrector).map_err(|e| e.to_string())?);
    }
    let report = last.expect("three intervals");
    let (mut worst_ssim, mut worst_psnr) = (f64::INFINITY, f64::INFINITY);
    for ((cam, original), mask) in session.cameras().iter().zip(session.originals()).zip(&report.masks) {
        let after = rasterize_rgb(&edited, cam, session.params.background);
        let outside: Vec<bool> = mask.bits.iter().map(|b| !b).collect();
        worst_ssim = worst_ssim.min(masked_ssim(&after, original, &outside));
        worst_psnr = worst_psnr.min(masked_psnr(&after, original, &outside));
    }
    ensure(worst_ssim >= 0.995 && worst_psnr >= 40.0, || {
        format!("outside the mask: SSIM {worst_ssim:.4}, PSNR {worst_psnr:.2} dB")
    })?;
    let psnr = if worst_psnr.is_finite() && worst_psnr < 1e6 {
        format!("{worst_psnr:.2} dB")
    } else {
        "inf (identical)".into()
    };
    Ok(format!("worst view outside the mask: SSIM {worst_ssim:.4}, PSNR {psnr}"))
}
