//! Masked composite image loss and its pixel gradient.
//!
//! Outside the edit mask the render is pulled toward the original view with
//! L1 + (1 - SSIM); inside it is pulled toward the corrected view through a
//! perceptual slot (plain or multi-scale L1 in-repo).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Mask2D, RgbImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("image shapes differ: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_1: f64,
    pub lambda_ssim: f64,
    pub lambda_perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_1: 8.0, lambda_ssim: 2.0, lambda_perc: 1.0 }
    }
}

/// Stand-in for a learned perceptual distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perceptual {
    #[default]
    L1,
    /// Equal-weight L1 at full, half and quarter resolution.
    MultiScaleL1,
}

/// Supervision for one view.
#[derive(Debug, Clone)]
pub struct ViewTarget {
    pub view_id: String,
    pub original: RgbImage,
    pub edited: RgbImage,
    pub mask: Mask2D,
}

impl ViewTarget {
    pub fn check(&self, rendered: &RgbImage) -> Result<(), LossError> {
        let (w, h) = (rendered.width, rendered.height);
        if !self.original.same_shape(rendered)
            || !self.edited.same_shape(rendered)
            || self.mask.width != w
            || self.mask.height != h
        {
            return Err(LossError::Shape(format!("view `{}` targets do not match the {w}x{h} render", self.view_id)));
        }
        Ok(())
    }
}

/// Loss value with its unweighted parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Mean L1 over pixels outside the mask.
    pub l1: f64,
    /// Mean `1 - SSIM` over pixels outside the mask.
    pub ssim: f64,
    /// Perceptual distance over pixels inside the mask.
    pub perc: f64,
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable same-size Gaussian filter with zero padding. The kernel is
/// symmetric, so this operator is its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    // Rows are blurred into a buffer with `r` zero rows above and below, so
    // the vertical pass needs no bounds checks. Adding the zero taps leaves
    // every sum bit-identical to skipping them.
    let mut padded_row = vec![0.0; w + 2 * r];
    let mut tmp = vec![0.0; w * (h + 2 * r)];
    for y in 0..h {
        padded_row[r..r + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
        let dst = &mut tmp[(y + r) * w..(y + r + 1) * w];
        for (x, d) in dst.iter_mut().enumerate() {
            let src = &padded_row[x..x + SSIM_WINDOW];
            let mut acc = 0.0;
            for t in 0..SSIM_WINDOW {
                acc += k[t] * src[t];
            }
            *d = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let dst = &mut out[y * w..(y + 1) * w];
        for (t, kv) in k.iter().enumerate() {
            let src = &tmp[(y + t) * w..(y + t + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

fn channel(img: &RgbImage, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

struct SsimStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn ssim_stats(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> SsimStats {
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = blur(x, w, h, k);
    let mu_y = blur(y, w, h, k);
    let m_xx = blur(&prod(x, x), w, h, k);
    let m_yy = blur(&prod(y, y), w, h, k);
    let m_xy = blur(&prod(x, y), w, h, k);
    let n = w * h;
    let (mut a1, mut a2, mut b1, mut b2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = m_xx[i] - mx * mx;
        let var_y = m_yy[i] - my * my;
        let cov = m_xy[i] - mx * my;
        a1[i] = 2.0 * mx * my + SSIM_C1;
        a2[i] = 2.0 * cov + SSIM_C2;
        b1[i] = mx * mx + my * my + SSIM_C1;
        b2[i] = var_x + var_y + SSIM_C2;
    }
    SsimStats { mu_x, mu_y, a1, a2, b1, b2 }
}

/// Per-pixel SSIM averaged over the three channels.
pub fn ssim_map(x: &RgbImage, y: &RgbImage) -> Vec<f64> {
    assert!(x.same_shape(y));
    let (w, h) = (x.width, x.height);
    let k = gaussian_kernel();
    let mut out = vec![0.0; w * h];
    for c in 0..3 {
        let s = ssim_stats(&channel(x, c), &channel(y, c), w, h, &k);
        for i in 0..w * h {
            out[i] += (s.a1[i] * s.a2[i]) / (s.b1[i] * s.b2[i]) / 3.0;
        }
    }
    out
}

pub fn ssim(x: &RgbImage, y: &RgbImage) -> f64 {
    let m = ssim_map(x, y);
    m.iter().sum::<f64>() / m.len() as f64
}

/// Mean SSIM over pixels where `select` is true.
pub fn masked_ssim(x: &RgbImage, y: &RgbImage, select: &[bool]) -> f64 {
    let m = ssim_map(x, y);
    let (sum, n) = m.iter().zip(select).filter(|(_, &s)| s).fold((0.0, 0usize), |(a, n), (v, _)| (a + v, n + 1));
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// PSNR in dB over pixels where `select` is true, for signals in [0, 1].
pub fn masked_psnr(x: &RgbImage, y: &RgbImage, select: &[bool]) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for (p, &s) in select.iter().enumerate() {
        if s {
            for c in 0..3 {
                let d = x.data[p * 3 + c] - y.data[p * 3 + c];
                se += d * d;
            }
            n += 3;
        }
    }
    if n == 0 || se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (1.0 / (se / n as f64)).log10()
}

/// Gradient of `Σ_p weight(p) · (1 - SSIM_c(p))` for one channel with respect
/// to `x`, `y` held fixed.
fn ssim_channel_grad(
    x: &[f64],
    y: &[f64],
    w: usize,
    h: usize,
    weight: &[f64],
    k: &[f64; SSIM_WINDOW],
) -> (f64, Vec<f64>) {
    let s = ssim_stats(x, y, w, h, k);
    let n = w * h;
    let mut value = 0.0;
    let (mut g_mu, mut g_xx, mut g_xy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        if weight[i] == 0.0 {
            continue;
        }
        let den = s.b1[i] * s.b2[i];
        let ssim = s.a1[i] * s.a2[i] / den;
        value += weight[i] * (1.0 - ssim);
        let (mx, my) = (s.mu_x[i], s.mu_y[i]);
        let d_mu = 2.0 * my * (s.a2[i] - s.a1[i]) / den - 2.0 * mx * ssim * (1.0 / s.b1[i] - 1.0 / s.b2[i]);
        let d_xx = -ssim / s.b2[i];
        let d_xy = 2.0 * s.a1[i] / den;
        g_mu[i] = -weight[i] * d_mu;
        g_xx[i] = -weight[i] * d_xx;
        g_xy[i] = -weight[i] * d_xy;
    }
    let (b_mu, b_xx, b_xy) = (blur(&g_mu, w, h, k), blur(&g_xx, w, h, k), blur(&g_xy, w, h, k));
    let grad = (0..n).map(|q| b_mu[q] + 2.0 * x[q] * b_xx[q] + y[q] * b_xy[q]).collect();
    (value, grad)
}

fn box_down(data: &[f64], w: usize, h: usize, stride: usize, channels: usize) -> (Vec<f64>, usize, usize) {
    let (dw, dh) = (w / stride, h / stride);
    let norm = (stride * stride) as f64;
    let mut out = vec![0.0; dw * dh * channels];
    for y in 0..dh * stride {
        for x in 0..dw * stride {
            for c in 0..channels {
                out[((y / stride) * dw + x / stride) * channels + c] += data[(y * w + x) * channels + c] / norm;
            }
        }
    }
    (out, dw, dh)
}

/// Masked L1 of `r` against `e` at one pyramid level; adds its gradient
/// (scaled by `scale`) into `grad`.
fn perceptual_level(
    r: &RgbImage,
    e: &RgbImage,
    mask: &[f64],
    stride: usize,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> Option<f64> {
    let (w, h) = (r.width, r.height);
    let (rd, dw, dh) = box_down(&r.data, w, h, stride, 3);
    let (ed, _, _) = box_down(&e.data, w, h, stride, 3);
    let (md, _, _) = box_down(mask, w, h, stride, 1);
    let mass: f64 = md.iter().sum();
    if dw == 0 || dh == 0 || mass == 0.0 {
        return None;
    }
    let mut value = 0.0;
    for q in 0..dw * dh {
        for c in 0..3 {
            value += md[q] * (rd[q * 3 + c] - ed[q * 3 + c]).abs() / 3.0;
        }
    }
    if let Some(grad) = grad {
        let norm = (stride * stride) as f64;
        for y in 0..dh * stride {
            for x in 0..dw * stride {
                let q = (y / stride) * dw + x / stride;
                for c in 0..3 {
                    let d = rd[q * 3 + c] - ed[q * 3 + c];
                    grad[(y * w + x) * 3 + c] += scale * md[q] * sign(d) / (3.0 * mass * norm);
                }
            }
        }
    }
    Some(value / mass)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn perceptual(
    rendered: &RgbImage,
    edited: &RgbImage,
    mask: &Mask2D,
    kind: Perceptual,
    scale: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let weights: Vec<f64> = mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let strides: &[usize] = match kind {
        Perceptual::L1 => &[1],
        Perceptual::MultiScaleL1 => &[1, 2, 4],
    };
    // Levels where the mask vanishes after downsampling drop out.
    let active: Vec<usize> = strides
        .iter()
        .copied()
        .filter(|&s| perceptual_level(rendered, edited, &weights, s, 0.0, None).is_some())
        .collect();
    if active.is_empty() {
        return 0.0;
    }
    let level_weight = 1.0 / active.len() as f64;
    active
        .iter()
        .map(|&s| {
            level_weight
                * perceptual_level(rendered, edited, &weights, s, scale * level_weight, grad.as_deref_mut())
                    .unwrap_or(0.0)
        })
        .sum()
}

fn evaluate(
    rendered: &RgbImage,
    target: &ViewTarget,
    w: &LossWeights,
    kind: Perceptual,
    mut grad: Option<&mut [f64]>,
) -> Result<LossTerms, LossError> {
    target.check(rendered)?;
    let (width, height) = (rendered.width, rendered.height);
    let n = width * height;
    let outside = target.mask.bits.iter().filter(|&&b| !b).count();

    let mut terms = LossTerms::default();
    if outside > 0 {
        let inv = 1.0 / outside as f64;
        let mut l1 = 0.0;
        for p in 0..n {
            if target.mask.bits[p] {
                continue;
            }
            for c in 0..3 {
                let d = rendered.data[p * 3 + c] - target.original.data[p * 3 + c];
                l1 += d.abs() / 3.0;
                if let Some(g) = grad.as_deref_mut() {
                    g[p * 3 + c] += w.lambda_1 * inv * sign(d) / 3.0;
                }
            }
        }
        terms.l1 = l1 * inv;

        let k = gaussian_kernel();
        let weight: Vec<f64> = target.mask.bits.iter().map(|&b| if b { 0.0 } else { inv / 3.0 }).collect();
        for c in 0..3 {
            let (x, y) = (channel(rendered, c), channel(&target.original, c));
            let (v, g) = ssim_channel_grad(&x, &y, width, height, &weight, &k);
            terms.ssim += v;
            if let Some(out) = grad.as_deref_mut() {
                for p in 0..n {
                    out[p * 3 + c] += w.lambda_ssim * g[p];
                }
            }
        }
    }
    terms.perc = perceptual(rendered, &target.edited, &target.mask, kind, w.lambda_perc, grad);
    terms.total = w.lambda_1 * terms.l1 + w.lambda_ssim * terms.ssim + w.lambda_perc * terms.perc;
    Ok(terms)
}

pub fn loss_eval(
    rendered: &RgbImage,
    target: &ViewTarget,
    w: &LossWeights,
    kind: Perceptual,
) -> Result<LossTerms, LossError> {
    evaluate(rendered, target, w, kind, None)
}

/// Loss and its gradient with respect to every rendered channel value.
pub fn loss_and_grad(
    rendered: &RgbImage,
    target: &ViewTarget,
    w: &LossWeights,
    kind: Perceptual,
) -> Result<(LossTerms, Vec<f64>), LossError> {
    let mut grad = vec![0.0; rendered.data.len()];
    let terms = evaluate(rendered, target, w, kind, Some(&mut grad))?;
    Ok((terms, grad))
}
