//! Deterministic synthetic scenes and camera rigs for tests, benchmarks and
//! demos.
//!
//! World convention: `-y` is up. A textured floor slab sits at `y = FLOOR_Y`
//! with a red ball and a blue block resting on it.

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::DragSpec;
use crate::render::Camera;
use crate::scene::{Gaussian, GaussianScene, Vec3};

pub const FLOOR_Y: f64 = 0.35;
pub const BALL_CENTER: [f64; 3] = [0.0, 0.05, 0.0];
pub const BALL_RADIUS: f64 = 0.25;
pub const BLOCK_CENTER: [f64; 3] = [0.8, 0.15, 0.55];

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(rng.random_range(-PI..PI), rng.random_range(-PI..PI), rng.random_range(-PI..PI))
}

/// Scene of `n` Gaussians: about 60% floor, 25% ball, 15% block.
pub fn fixture_scene(n: usize, seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ball = n / 4;
    let n_block = n * 3 / 20;
    let n_floor = n - n_ball - n_block;
    // Splat size shrinks with density so coverage stays comparable.
    let density = (n as f64 / 2000.0).sqrt().max(0.5);
    let mut gaussians = Vec::with_capacity(n);

    for _ in 0..n_floor {
        let x: f64 = rng.random_range(-1.6..1.6);
        let z: f64 = rng.random_range(-1.6..1.6);
        let checker = ((x * 2.5).floor() + (z * 2.5).floor()) as i64 % 2 == 0;
        let base = if checker { [0.75, 0.7, 0.6] } else { [0.35, 0.4, 0.3] };
        let jitter = rng.random_range(-0.05..0.05);
        let s = 0.09 / density;
        gaussians.push(Gaussian::new(
            Vec3::new(x, FLOOR_Y + rng.random_range(-0.01..0.01), z),
            Vec3::new(s * rng.random_range(0.8..1.2), 0.01, s * rng.random_range(0.8..1.2)),
            UnitQuaternion::from_euler_angles(0.0, rng.random_range(-PI..PI), 0.0),
            rng.random_range(0.6..0.95),
            base.map(|c| c + jitter),
        ));
    }

    let ball = Vector3::from(BALL_CENTER);
    for _ in 0..n_ball {
        let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let dir = if dir.norm() < 1e-3 { Vec3::x() } else { dir.normalize() };
        let r = BALL_RADIUS * rng.random_range(0.7..1.0f64).cbrt();
        let shade = 0.75 + 0.2 * (-dir.y);
        let s = 0.06 / density;
        gaussians.push(Gaussian::new(
            ball + dir * r,
            Vec3::new(s * rng.random_range(0.7..1.3), s * rng.random_range(0.7..1.3), s * rng.random_range(0.7..1.3)),
            random_rotation(&mut rng),
            rng.random_range(0.7..0.95),
            [0.85 * shade, 0.15 * shade, 0.12 * shade],
        ));
    }

    let block = Vector3::from(BLOCK_CENTER);
    for _ in 0..n_block {
        let off = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
        let s = 0.06 / density;
        gaussians.push(Gaussian::new(
            block + off,
            Vec3::repeat(s * rng.random_range(0.8..1.2)),
            random_rotation(&mut rng),
            rng.random_range(0.7..0.95),
            [0.15, 0.25 + 0.1 * off.x, 0.8],
        ));
    }
    GaussianScene::new(gaussians, 0)
}

/// `count` cameras on a ring of radius `radius`, raised by `height`, all
/// looking at the ball.
pub fn ring_cameras(count: usize, radius: f64, height: f64, (width, h): (usize, usize)) -> Vec<Camera> {
    let target = Vector3::from(BALL_CENTER);
    (0..count)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / count as f64;
            let eye = Vec3::new(radius * t.cos(), -height, radius * t.sin());
            Camera::look_at(
                format!("cam{i:03}"),
                eye,
                target,
                Vec3::new(0.0, -1.0, 0.0),
                0.9 * width as f64,
                (width, h),
            )
        })
        .collect()
}

/// Single-handle drag that slides the ball sideways along the floor.
pub fn fixture_drag(distance: f64) -> DragSpec {
    let h = Vector3::from(BALL_CENTER);
    DragSpec::new(vec![h], vec![h + Vec3::new(distance, 0.0, -0.5 * distance)], vec![BALL_RADIUS + 0.05])
}

/// Random small scene for property tests: `n` Gaussians in front of a
/// camera at the origin looking down `+z`.
pub fn random_scene(n: usize, seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            Gaussian::new(
                Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(2.0..5.0)),
                Vec3::new(rng.random_range(0.05..0.35), rng.random_range(0.05..0.35), rng.random_range(0.05..0.35)),
                random_rotation(&mut rng),
                rng.random_range(0.05..0.99),
                [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
            )
        })
        .collect();
    GaussianScene::new(gaussians, 0)
}

/// Camera at the origin looking down `+z` with the principal point centered.
pub fn origin_camera(width: usize, height: usize) -> Camera {
    Camera::look_at("origin", Vec3::zeros(), Vec3::z(), Vec3::new(0.0, -1.0, 0.0), 0.9 * width as f64, (width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_deterministic() {
        assert_eq!(fixture_scene(500, 7), fixture_scene(500, 7));
        assert_ne!(fixture_scene(500, 7), fixture_scene(500, 8));
        assert_eq!(fixture_scene(5000, 1).len(), 5000);
    }

    #[test]
    fn drag_captures_the_ball() {
        let scene = fixture_scene(2000, 3);
        let a = crate::deform::assign_handles(&scene, &fixture_drag(0.6)).unwrap();
        assert!(a.union.len() >= 450, "{}", a.union.len());
    }

    #[test]
    fn ring_cameras_see_the_ball() {
        for cam in ring_cameras(8, 3.0, 1.2, (64, 64)) {
            cam.validate().unwrap();
            let (px, _) = cam.project(&Vector3::from(BALL_CENTER)).unwrap();
            assert!((px.x - 31.5).abs() < 1e-9 && (px.y - 31.5).abs() < 1e-9);
        }
    }
}
