//! In-memory Gaussian scene.
//!
//! Opacity and scale are kept in their pre-activation form (logit and log),
//! exactly as the 3DGS checkpoint stores them, so a scene read from disk
//! writes back bit-for-bit. Use the accessors to work in activated space.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Degree-0 spherical harmonics basis constant.
pub const SH_C0: f64 = 0.28209479177387814;

pub type Vec3 = Vector3<f64>;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Maps the DC spherical-harmonics term to a clamped RGB color.
pub fn dc_to_rgb(sh_dc: [f64; 3]) -> [f64; 3] {
    sh_dc.map(|c| (0.5 + SH_C0 * c).clamp(0.0, 1.0))
}

/// Inverse of [`dc_to_rgb`] on the unclamped range.
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

/// Number of higher-order SH coefficients for a degree, all channels.
pub fn sh_rest_len(degree: u8) -> usize {
    let d = degree as usize + 1;
    3 * (d * d - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub center: Vec3,
    /// Natural log of the per-axis scale.
    pub log_scale: Vec3,
    /// Unit quaternion, scalar first when serialized.
    pub rotation: Quaternion<f64>,
    pub opacity_logit: f64,
    pub sh_dc: [f64; 3],
    /// Higher-order coefficients in checkpoint order (`f_rest_*`).
    pub sh_rest: Vec<f64>,
}

impl Gaussian {
    /// Builds a Gaussian from activated parameters.
    pub fn new(center: Vec3, scale: Vec3, rotation: UnitQuaternion<f64>, opacity: f64, rgb: [f64; 3]) -> Self {
        Self {
            center,
            log_scale: scale.map(f64::ln),
            rotation: rotation.into_inner(),
            opacity_logit: logit(opacity),
            sh_dc: rgb_to_dc(rgb),
            sh_rest: Vec::new(),
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn set_opacity(&mut self, alpha: f64) {
        self.opacity_logit = logit(alpha);
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn set_scale(&mut self, scale: Vec3) {
        self.log_scale = scale.map(f64::ln);
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_normalize(self.rotation)
    }

    pub fn color(&self) -> [f64; 3] {
        dc_to_rgb(self.sh_dc)
    }

    /// World-space covariance `R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.unit_rotation().to_rotation_matrix().into_inner();
        let s = self.scale();
        let d = Matrix3::from_diagonal(&s.component_mul(&s));
        r * d * r.transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: u8,
    /// Bumped on every structural change (append, split).
    pub generation: u64,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>, sh_degree: u8) -> Self {
        Self { gaussians, sh_degree, generation: 0 }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn bbox(&self) -> Option<Aabb> {
        let first = self.gaussians.first()?.center;
        let mut b = Aabb { min: first, max: first };
        for g in &self.gaussians[1..] {
            b.min = b.min.inf(&g.center);
            b.max = b.max.sup(&g.center);
        }
        Some(b)
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.gaussians.iter().map(|g| g.center).collect()
    }

    pub fn translate(&mut self, t: &Vec3) {
        for g in &mut self.gaussians {
            g.center += t;
        }
    }
}
