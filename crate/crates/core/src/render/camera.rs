use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::RenderError;
use crate::scene::Vec3;

/// Pinhole camera. Pixel centers sit at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub world_to_camera: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraRecord {
    id: String,
    w2c: Vec<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraFile {
    cameras: Vec<CameraRecord>,
}

impl Camera {
    pub fn new(
        id: impl Into<String>,
        world_to_camera: Matrix4<f64>,
        (fx, fy): (f64, f64),
        (cx, cy): (f64, f64),
        (width, height): (usize, usize),
    ) -> Result<Self, RenderError> {
        let cam = Self { id: id.into(), world_to_camera, fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; +y of the image points along
    /// `-up` (OpenCV convention: x right, y down, z forward).
    pub fn look_at(
        id: impl Into<String>,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        (width, height): (usize, usize),
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let trans = -(rot * eye);
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&trans);
        Self {
            id: id.into(),
            world_to_camera: w2c,
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |reason: &str| Err(RenderError::InvalidCamera { id: self.id.clone(), reason: reason.into() });
        let r = self.rotation();
        if (r * r.transpose() - Matrix3::identity()).abs().max() > 1e-5 {
            return bad("rotation block is not orthonormal");
        }
        let last = self.world_to_camera.row(3);
        if (last[0], last[1], last[2], last[3]) != (0.0, 0.0, 0.0, 1.0) {
            return bad("last row must be [0 0 0 1]");
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be at least 1x1");
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }

    /// Pixel position and camera-space depth; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(Vector2<f64>, f64)> {
        let t = self.to_camera(p);
        if t.z <= 0.0 {
            return None;
        }
        Some((Vector2::new(self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy), t.z))
    }

    /// World point at camera-space depth `z` along the ray through `px`.
    pub fn unproject(&self, px: &Vector2<f64>, z: f64) -> Vec3 {
        let t = Vector3::new((px.x - self.cx) / self.fx * z, (px.y - self.cy) / self.fy * z, z);
        self.rotation().transpose() * (t - self.translation())
    }

    pub fn contains_pixel(&self, px: &Vector2<f64>) -> bool {
        px.x >= -0.5 && px.y >= -0.5 && px.x < self.width as f64 - 0.5 && px.y < self.height as f64 - 0.5
    }

    /// Same intrinsics rescaled to a new resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            ..self.clone()
        }
    }
}

pub fn parse_cameras(json: &str) -> Result<Vec<Camera>, RenderError> {
    let file: CameraFile = serde_json::from_str(json).map_err(|e| RenderError::CameraFile(e.to_string()))?;
    file.cameras
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.w2c.len() != 16 {
                return Err(RenderError::CameraFile(format!("cameras[{i}].w2c must hold 16 numbers")));
            }
            let w2c = Matrix4::from_row_slice(&r.w2c);
            Camera::new(r.id, w2c, (r.fx, r.fy), (r.cx, r.cy), (r.width, r.height))
        })
        .collect()
}

pub fn cameras_to_json(cameras: &[Camera]) -> String {
    let file = CameraFile {
        cameras: cameras
            .iter()
            .map(|c| CameraRecord {
                id: c.id.clone(),
                w2c: (0..4).flat_map(|r| (0..4).map(move |k| (r, k))).map(|(r, k)| c.world_to_camera[(r, k)]).collect(),
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("camera json")
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>, RenderError> {
    let text = std::fs::read_to_string(path).map_err(|e| RenderError::CameraFile(e.to_string()))?;
    parse_cameras(&text)
}
