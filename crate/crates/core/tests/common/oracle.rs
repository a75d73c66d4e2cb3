//! Brute-force reference renderer. Shares no code with the tiled
//! rasterizer: projection, covariance, sorting and blending are written out
//! directly from the pinhole/EWA model.

use gsdrag_core::render::Camera;
use gsdrag_core::{Gaussian, GaussianScene};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

pub const NEAR: f64 = 0.2;
pub const LOW_PASS: f64 = 0.3;
pub const CLAMP: f64 = 0.99;
pub const SKIP: f64 = 1.0 / 255.0;
pub const STOP: f64 = 1e-4;

pub struct OracleSplat {
    pub index: usize,
    pub mean: [f64; 2],
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn dc_color(dc: [f64; 3]) -> [f64; 3] {
    let c0 = 0.5 / std::f64::consts::PI.sqrt();
    dc.map(|v| (0.5 + c0 * v).clamp(0.0, 1.0))
}

fn rotation_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn project(index: usize, g: &Gaussian, cam: &Camera) -> Option<OracleSplat> {
    let m = &cam.world_to_camera;
    let w = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    let p = w * g.center + t;
    if p.z <= NEAR {
        return None;
    }
    let q = g.rotation;
    let r = rotation_matrix([q.w, q.i, q.j, q.k]);
    let s = g.log_scale.map(f64::exp);
    let sigma = r * Matrix3::from_diagonal(&s.component_mul(&s)) * r.transpose();
    let z2 = p.z * p.z;
    let j = Matrix2x3::new(cam.fx / p.z, 0.0, -cam.fx * p.x / z2, 0.0, cam.fy / p.z, -cam.fy * p.y / z2);
    let mut cov = j * w * sigma * w.transpose() * j.transpose();
    cov[(0, 0)] += LOW_PASS;
    cov[(1, 1)] += LOW_PASS;
    Some(OracleSplat {
        index,
        mean: [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy],
        cov,
        depth: p.z,
        opacity: sigmoid(g.opacity_logit),
        color: dc_color(g.sh_dc),
    })
}

/// Alpha of `s` at pixel `(x, y)` before thresholding, or `None` outside
/// the 3-sigma box.
pub fn raw_alpha(s: &OracleSplat, x: f64, y: f64) -> Option<f64> {
    let d = nalgebra::Vector2::new(x - s.mean[0], y - s.mean[1]);
    if d.x.abs() > 3.0 * s.cov[(0, 0)].sqrt() || d.y.abs() > 3.0 * s.cov[(1, 1)].sqrt() {
        return None;
    }
    let inv = s.cov.try_inverse()?;
    Some((s.opacity * (-0.5 * d.dot(&(inv * d))).exp()).min(CLAMP))
}

pub struct OracleImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
}

/// Renders every pixel independently: all splats are tested and sorted by
/// (depth, index) for each pixel. With `early_exit` the walk stops before
/// the term that would take transmittance below the stop threshold;
/// without it every term is blended.
pub fn render(scene: &GaussianScene, cam: &Camera, background: [f64; 3], early_exit: bool) -> OracleImage {
    let splats: Vec<OracleSplat> = scene.gaussians.iter().enumerate().filter_map(|(i, g)| project(i, g, cam)).collect();
    let mut out = OracleImage {
        width: cam.width,
        height: cam.height,
        rgb: Vec::with_capacity(cam.width * cam.height),
        alpha: Vec::new(),
        transmittance: Vec::new(),
    };
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut hits: Vec<(&OracleSplat, f64)> = splats
                .iter()
                .filter_map(|s| raw_alpha(s, x as f64, y as f64).map(|a| (s, a)))
                .filter(|(_, a)| *a >= SKIP)
                .collect();
            hits.sort_by(|a, b| a.0.depth.total_cmp(&b.0.depth).then(a.0.index.cmp(&b.0.index)));
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut acc = 0.0;
            for (s, a) in hits {
                if early_exit && t * (1.0 - a) < STOP {
                    break;
                }
                for k in 0..3 {
                    c[k] += s.color[k] * a * t;
                }
                acc += a * t;
                t *= 1.0 - a;
            }
            out.rgb.push([0, 1, 2].map(|k| (c[k] + background[k] * t).clamp(0.0, 1.0)));
            out.alpha.push(acc);
            out.transmittance.push(t);
        }
    }
    out
}
