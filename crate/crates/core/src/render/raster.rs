//! Tile-based forward splatting.
//!
//! Gaussians are projected once per frame, sorted globally by camera depth
//! (ties by element index) and binned per pixel in that order. Pixels are
//! shaded in parallel by 16x16 tile. A splat contributes to a pixel only if
//! the pixel center lies inside the splat's 3σ bounding box, so the image
//! does not depend on the tiling.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use super::camera::Camera;
use super::RenderError;
use crate::image::{DepthMap, RgbImage, ScalarImage};
use crate::scene::{Gaussian, GaussianScene, Vec3, SH_C0};

pub const NEAR_PLANE: f64 = 0.2;
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
pub const TILE: usize = 16;
/// Accumulated alpha needed for a depth sample to count as valid.
pub const DEPTH_VALID_ALPHA: f64 = 0.5;
const BIN_SLACK: f64 = 1e-7;

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

impl Projected {
    /// Inverse covariance as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub fn conic(&self) -> [f64; 3] {
        let (a, b, c) = (self.cov[(0, 0)], self.cov[(0, 1)], self.cov[(1, 1)]);
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }

    /// Half extents of the 3σ ellipse's bounding box.
    pub fn extent(&self) -> [f64; 2] {
        [3.0 * self.cov[(0, 0)].sqrt(), 3.0 * self.cov[(1, 1)].sqrt()]
    }
}

/// EWA projection; `None` when the Gaussian is culled.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<Projected> {
    let t = cam.to_camera(&g.center);
    if t.z <= NEAR_PLANE {
        return None;
    }
    let mean = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
    let j =
        Matrix2x3::new(cam.fx / t.z, 0.0, -cam.fx * t.x / (t.z * t.z), 0.0, cam.fy / t.z, -cam.fy * t.y / (t.z * t.z));
    let jw = j * cam.rotation();
    let mut cov = jw * g.covariance() * jw.transpose();
    cov[(0, 0)] += LOW_PASS;
    cov[(1, 1)] += LOW_PASS;
    let p = Projected { mean, cov, depth: t.z };
    let [ex, ey] = p.extent();
    let (w, h) = (cam.width as f64 - 1.0, cam.height as f64 - 1.0);
    if mean.x + ex < 0.0 || mean.x - ex > w || mean.y + ey < 0.0 || mean.y - ey > h {
        return None;
    }
    Some(p)
}

/// A projected splat ready for compositing.
#[derive(Debug, Clone, Copy)]
pub struct Splat {
    /// Element index in the scene.
    pub index: usize,
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub extent: [f64; 2],
    pub depth: f64,
    pub opacity: f64,
}

impl Splat {
    /// Gaussian falloff at a pixel center, or `None` outside the 3σ box.
    #[inline]
    pub fn falloff(&self, px: f64, py: f64) -> Option<f64> {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        if dx.abs() > self.extent[0] || dy.abs() > self.extent[1] {
            return None;
        }
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
        Some(power.exp())
    }
}

/// One compositing term at a pixel.
#[derive(Debug, Clone, Copy)]
pub struct Contribution {
    /// Position in [`Frame::splats`].
    pub splat: usize,
    pub alpha: f64,
    pub falloff: f64,
    /// `alpha` hit the 0.99 clamp.
    pub clamped: bool,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
}

/// Projection, global sort and per-pixel bins for one camera. Tiles are the
/// unit of parallel work.
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub splats: Vec<Splat>,
    tiles_x: usize,
    tiles: usize,
    /// CSR bins: splats possibly covering pixel `p` are
    /// `entries[offsets[p]..offsets[p + 1]]`, front to back.
    offsets: Vec<u32>,
    entries: Vec<u32>,
}

impl Frame {
    pub fn new(scene: &GaussianScene, cam: &Camera) -> Self {
        let mut splats: Vec<Splat> = scene
            .gaussians
            .iter()
            .enumerate()
            .filter_map(|(index, g)| {
                let p = project_gaussian(g, cam)?;
                Some(Splat {
                    index,
                    mean: [p.mean.x, p.mean.y],
                    conic: p.conic(),
                    extent: p.extent(),
                    depth: p.depth,
                    opacity: g.opacity(),
                })
            })
            .collect();
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

        let (w, h) = (cam.width, cam.height);
        // Pixel box padded so rounding never drops a covered pixel; the
        // exact test happens in `composite`.
        let boxes: Vec<Option<[usize; 4]>> = splats
            .iter()
            .map(|s| {
                let lo_x = (s.mean[0] - s.extent[0] - BIN_SLACK).ceil();
                let hi_x = (s.mean[0] + s.extent[0] + BIN_SLACK).floor();
                let lo_y = (s.mean[1] - s.extent[1] - BIN_SLACK).ceil();
                let hi_y = (s.mean[1] + s.extent[1] + BIN_SLACK).floor();
                if hi_x < lo_x
                    || hi_y < lo_y
                    || hi_x < 0.0
                    || hi_y < 0.0
                    || lo_x > (w - 1) as f64
                    || lo_y > (h - 1) as f64
                {
                    return None;
                }
                let clamp = |v: f64, max: usize| v.clamp(0.0, max as f64) as usize;
                Some([clamp(lo_x, w - 1), clamp(hi_x, w - 1), clamp(lo_y, h - 1), clamp(hi_y, h - 1)])
            })
            .collect();
        let mut offsets = vec![0u32; w * h + 1];
        for [x0, x1, y0, y1] in boxes.iter().flatten() {
            for y in *y0..=*y1 {
                for x in *x0..=*x1 {
                    offsets[y * w + x + 1] += 1;
                }
            }
        }
        for p in 0..w * h {
            offsets[p + 1] += offsets[p];
        }
        let mut cursor: Vec<u32> = offsets[..w * h].to_vec();
        let mut entries = vec![0u32; offsets[w * h] as usize];
        for (si, b) in boxes.iter().enumerate() {
            let Some([x0, x1, y0, y1]) = *b else { continue };
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let c = &mut cursor[y * w + x];
                    entries[*c as usize] = si as u32;
                    *c += 1;
                }
            }
        }
        let tiles_x = w.div_ceil(TILE);
        let tiles = tiles_x * h.div_ceil(TILE);
        Self { width: w, height: h, splats, tiles_x, tiles, offsets, entries }
    }

    /// Re-reads activated opacities after an appearance update. Geometry
    /// and bins are unchanged.
    pub fn refresh_opacity(&mut self, scene: &GaussianScene) {
        for s in &mut self.splats {
            s.opacity = scene.gaussians[s.index].opacity();
        }
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let (w, h) = (self.width, self.height);
        (ty * TILE..((ty + 1) * TILE).min(h))
            .flat_map(move |y| (tx * TILE..((tx + 1) * TILE).min(w)).map(move |x| (x, y)))
    }

    /// Front-to-back walk over the splats covering pixel `(x, y)`. Returns
    /// the final transmittance.
    #[inline]
    pub fn composite(&self, x: usize, y: usize, mut visit: impl FnMut(Contribution)) -> f64 {
        let (px, py) = (x as f64, y as f64);
        let mut t = 1.0;
        let p = y * self.width + x;
        for &si in &self.entries[self.offsets[p] as usize..self.offsets[p + 1] as usize] {
            let s = &self.splats[si as usize];
            let Some(falloff) = s.falloff(px, py) else { continue };
            let raw = s.opacity * falloff;
            let clamped = raw > ALPHA_MAX;
            let alpha = if clamped { ALPHA_MAX } else { raw };
            if alpha < ALPHA_MIN {
                continue;
            }
            let next = t * (1.0 - alpha);
            if next < TRANSMITTANCE_STOP {
                break;
            }
            visit(Contribution { splat: si as usize, alpha, falloff, clamped, transmittance: t });
            t = next;
        }
        t
    }

    /// Runs `shade` on every pixel, in parallel over tiles, and returns the
    /// per-pixel results in row-major order.
    pub fn map_pixels<T, F>(&self, shade: F) -> Vec<T>
    where
        T: Send + Default + Clone,
        F: Fn(usize, usize) -> T + Sync,
    {
        let blocks: Vec<Vec<((usize, usize), T)>> = (0..self.tiles)
            .into_par_iter()
            .map(|tile| self.tile_pixels(tile).map(|(x, y)| ((x, y), shade(x, y))).collect())
            .collect();
        let mut out = vec![T::default(); self.width * self.height];
        for block in blocks {
            for ((x, y), v) in block {
                out[y * self.width + x] = v;
            }
        }
        out
    }

    /// Same as [`map_pixels`](Self::map_pixels) but each tile also folds
    /// into its own accumulator; accumulators are returned in tile order so
    /// the caller can reduce them deterministically.
    pub fn fold_tiles<A, F>(&self, init: impl Fn() -> A + Sync, step: F) -> Vec<A>
    where
        A: Send,
        F: Fn(&mut A, usize, usize) + Sync,
    {
        (0..self.tiles)
            .into_par_iter()
            .map(|tile| {
                let mut acc = init();
                for (x, y) in self.tile_pixels(tile) {
                    step(&mut acc, x, y);
                }
                acc
            })
            .collect()
    }
}

/// Compositing terms of every pixel, recorded once so the backward pass
/// does not repeat the forward walk. Stored per tile.
pub struct Trace {
    blocks: Vec<Vec<Contribution>>,
    /// Per row-major pixel: tile, term range in that tile's block, final
    /// transmittance.
    spans: Vec<(u32, u32, u32, f64)>,
}

impl Trace {
    /// Terms of row-major pixel `p`, front to back, and its final
    /// transmittance.
    pub fn pixel(&self, p: usize) -> (&[Contribution], f64) {
        let (b, start, end, t) = self.spans[p];
        (&self.blocks[b as usize][start as usize..end as usize], t)
    }
}

impl Frame {
    pub fn trace(&self) -> Trace {
        let tiles = self.fold_tiles(
            || (Vec::with_capacity(TILE * TILE * 32), Vec::with_capacity(TILE * TILE)),
            |(terms, pixels): &mut (Vec<Contribution>, Vec<(usize, u32, u32, f64)>), x, y| {
                let start = terms.len() as u32;
                let t = self.composite(x, y, |k| terms.push(k));
                pixels.push((y * self.width + x, start, terms.len() as u32, t));
            },
        );
        let mut spans = vec![(0, 0, 0, 1.0); self.width * self.height];
        let mut blocks = Vec::with_capacity(tiles.len());
        for (b, (terms, pixels)) in tiles.into_iter().enumerate() {
            for (p, start, end, t) in pixels {
                spans[p] = (b as u32, start, end, t);
            }
            blocks.push(terms);
        }
        Trace { blocks, spans }
    }
}

/// Per-Gaussian RGB color used for rendering (SH degree 0).
pub fn splat_colors(scene: &GaussianScene) -> Vec<[f64; 3]> {
    scene.gaussians.iter().map(Gaussian::color).collect()
}

pub fn rasterize_rgb(scene: &GaussianScene, cam: &Camera, background: [f64; 3]) -> RgbImage {
    let frame = Frame::new(scene, cam);
    let colors = splat_colors(scene);
    render_rgb_frame(&frame, &colors, background)
}

pub fn render_rgb_traced(frame: &Frame, trace: &Trace, colors: &[[f64; 3]], background: [f64; 3]) -> RgbImage {
    let mut data = Vec::with_capacity(frame.width * frame.height * 3);
    for p in 0..frame.width * frame.height {
        let (terms, t) = trace.pixel(p);
        let mut c = [0.0; 3];
        for k in terms {
            let col = colors[frame.splats[k.splat].index];
            let w = k.alpha * k.transmittance;
            for ch in 0..3 {
                c[ch] += col[ch] * w;
            }
        }
        data.extend((0..3).map(|ch| (c[ch] + background[ch] * t).clamp(0.0, 1.0)));
    }
    RgbImage { width: frame.width, height: frame.height, data }
}

pub fn render_rgb_frame(frame: &Frame, colors: &[[f64; 3]], background: [f64; 3]) -> RgbImage {
    let pixels = frame.map_pixels(|x, y| {
        let mut c = [0.0; 3];
        let t = frame.composite(x, y, |k| {
            let col = colors[frame.splats[k.splat].index];
            let w = k.alpha * k.transmittance;
            for ch in 0..3 {
                c[ch] += col[ch] * w;
            }
        });
        [0, 1, 2].map(|ch| (c[ch] + background[ch] * t).clamp(0.0, 1.0))
    });
    RgbImage { width: frame.width, height: frame.height, data: pixels.into_iter().flatten().collect() }
}

pub fn rasterize_scalar(scene: &GaussianScene, cam: &Camera, values: &[f64]) -> Result<ScalarImage, RenderError> {
    if values.len() != scene.len() {
        return Err(RenderError::LengthMismatch { expected: scene.len(), got: values.len() });
    }
    let frame = Frame::new(scene, cam);
    let data = frame.map_pixels(|x, y| {
        let mut v = 0.0;
        frame.composite(x, y, |k| v += values[frame.splats[k.splat].index] * k.alpha * k.transmittance);
        v
    });
    Ok(ScalarImage { width: cam.width, height: cam.height, data })
}

/// Accumulated alpha and final transmittance per pixel.
pub fn rasterize_coverage(scene: &GaussianScene, cam: &Camera) -> (ScalarImage, ScalarImage) {
    let frame = Frame::new(scene, cam);
    let pairs = frame.map_pixels(|x, y| {
        let mut acc = 0.0;
        let t = frame.composite(x, y, |k| acc += k.alpha * k.transmittance);
        (acc, t)
    });
    let (acc, trans): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let img = |data| ScalarImage { width: cam.width, height: cam.height, data };
    (img(acc), img(trans))
}

fn expected_depth(frame: &Frame, x: usize, y: usize) -> (f64, bool) {
    let (mut acc, mut zsum) = (0.0, 0.0);
    frame.composite(x, y, |k| {
        let w = k.alpha * k.transmittance;
        acc += w;
        zsum += w * frame.splats[k.splat].depth;
    });
    if acc >= DEPTH_VALID_ALPHA {
        (zsum / acc, true)
    } else {
        (0.0, false)
    }
}

pub fn rasterize_depth(scene: &GaussianScene, cam: &Camera) -> DepthMap {
    let frame = Frame::new(scene, cam);
    let samples = frame.map_pixels(|x, y| expected_depth(&frame, x, y));
    let (depth, valid) = samples.into_iter().unzip();
    DepthMap { width: cam.width, height: cam.height, depth, valid }
}

/// World point under pixel `px`, or `None` over empty space.
pub fn pick(scene: &GaussianScene, cam: &Camera, px: [f64; 2]) -> Result<Option<Vec3>, RenderError> {
    let p = Vector2::new(px[0], px[1]);
    if !p.iter().all(|v| v.is_finite()) || !cam.contains_pixel(&p) {
        return Err(RenderError::OutOfViewport { x: px[0], y: px[1] });
    }
    let frame = Frame::new(scene, cam);
    let (x, y) = (p.x.round() as usize, p.y.round() as usize);
    let (z, valid) = expected_depth(&frame, x, y);
    Ok(valid.then(|| cam.unproject(&p, z)))
}

/// Gradient of a scalar loss with respect to DC color and activated opacity.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ParamGrad {
    pub sh_dc: [f64; 3],
    pub opacity: f64,
}

/// Back-propagates per-pixel color gradients `dl_dpixel` (row-major RGB)
/// through front-to-back compositing.
pub fn backward_rgb(
    scene: &GaussianScene,
    frame: &Frame,
    colors: &[[f64; 3]],
    background: [f64; 3],
    dl_dpixel: &[f64],
) -> Vec<ParamGrad> {
    backward_traced(scene, frame, &frame.trace(), colors, background, dl_dpixel)
}

/// [`backward_rgb`] reusing the forward pass's trace.
pub fn backward_traced(
    scene: &GaussianScene,
    frame: &Frame,
    trace: &Trace,
    colors: &[[f64; 3]],
    background: [f64; 3],
    dl_dpixel: &[f64],
) -> Vec<ParamGrad> {
    let mut grads = vec![ParamGrad::default(); scene.len()];
    backward_accumulate(scene, frame, trace, colors, background, dl_dpixel, &mut grads);
    grads
}

/// Adds this frame's parameter gradients into `grads`.
pub fn backward_accumulate(
    scene: &GaussianScene,
    frame: &Frame,
    trace: &Trace,
    colors: &[[f64; 3]],
    background: [f64; 3],
    dl_dpixel: &[f64],
    grads: &mut [ParamGrad],
) {
    assert_eq!(dl_dpixel.len(), frame.width * frame.height * 3);
    assert_eq!(grads.len(), scene.len());
    // DC channels outside (0, 1) are clamped when rendering and pass no
    // gradient.
    let dc_live: Vec<[bool; 3]> = frame
        .splats
        .iter()
        .map(|s| {
            let g = &scene.gaussians[s.index];
            [0, 1, 2].map(|ch| {
                let raw = 0.5 + SH_C0 * g.sh_dc[ch];
                raw > 0.0 && raw < 1.0
            })
        })
        .collect();
    // Accumulated in pixel order so the sum is reproducible.
    for (p, g) in dl_dpixel.chunks_exact(3).enumerate() {
        if g == [0.0; 3] {
            continue;
        }
        let (terms, t_final) = trace.pixel(p);
        // Color carried by everything behind the current splat.
        let mut behind = [0, 1, 2].map(|ch| background[ch] * t_final);
        for k in terms.iter().rev() {
            let col = colors[frame.splats[k.splat].index];
            let w = k.alpha * k.transmittance;
            let live = dc_live[k.splat];
            let out = &mut grads[frame.splats[k.splat].index];
            let mut d_alpha = 0.0;
            for ch in 0..3 {
                if live[ch] {
                    out.sh_dc[ch] += g[ch] * w * SH_C0;
                }
                d_alpha += g[ch] * (col[ch] * k.transmittance - behind[ch] / (1.0 - k.alpha));
                behind[ch] += col[ch] * w;
            }
            if !k.clamped {
                out.opacity += d_alpha * k.falloff;
            }
        }
    }
}
