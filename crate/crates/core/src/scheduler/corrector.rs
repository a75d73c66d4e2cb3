//! View correctors: the component that turns a rendered view into an
//! improved target image at a given strength.

use std::io::Read;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::RgbImage;

#[derive(Debug, Error)]
pub enum CorrectorError {
    #[error("corrector unreachable: {0}")]
    Unreachable(String),
    #[error("corrector protocol error: {0}")]
    Protocol(String),
    #[error("strength {0} must lie in (0, 1]")]
    InvalidStrength(f64),
    #[error("corrector config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy)]
pub struct CorrectionRequest<'a> {
    pub image: &'a RgbImage,
    pub strength: f64,
    pub view_id: &'a str,
    pub interval: usize,
    pub pass: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub view_id: String,
    pub interval: usize,
    pub path: String,
}

/// Body of the buffer notification sent after every interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferManifest {
    pub images: Vec<BufferEntry>,
    /// Fine-tuning iterations the corrector is expected to run on the
    /// buffer; informational only.
    pub finetune_initial_steps: usize,
    pub finetune_interval_steps: usize,
}

impl BufferManifest {
    pub fn new(images: Vec<BufferEntry>) -> Self {
        Self { images, finetune_initial_steps: 200, finetune_interval_steps: 50 }
    }
}

pub trait Corrector: Send + Sync {
    fn correct(&self, req: &CorrectionRequest) -> Result<RgbImage, CorrectorError>;

    /// History buffer hook; in-process correctors ignore it.
    fn push_buffer(&self, _manifest: &BufferManifest) -> Result<(), CorrectorError> {
        Ok(())
    }

    fn health(&self) -> Result<(), CorrectorError> {
        Ok(())
    }
}

/// Checks the strength, calls the corrector and checks the reply shape.
pub fn correct_view(corrector: &dyn Corrector, req: &CorrectionRequest) -> Result<RgbImage, CorrectorError> {
    if !(req.strength > 0.0 && req.strength <= 1.0) {
        return Err(CorrectorError::InvalidStrength(req.strength));
    }
    let out = corrector.correct(req)?;
    if !out.same_shape(req.image) {
        return Err(CorrectorError::Protocol(format!(
            "view `{}`: sent {}x{}, received {}x{}",
            req.view_id, req.image.width, req.image.height, out.width, out.height
        )));
    }
    Ok(out)
}

pub struct IdentityCorrector;

impl Corrector for IdentityCorrector {
    fn correct(&self, req: &CorrectionRequest) -> Result<RgbImage, CorrectorError> {
        Ok(req.image.clone())
    }
}

/// Blur with sigma `4 * strength`, unsharp mask, and a little seeded noise.
pub struct MockCorrector {
    pub seed: u64,
}

const UNSHARP_AMOUNT: f64 = 0.5;
const UNSHARP_SIGMA: f64 = 1.0;
const MOCK_NOISE: f64 = 0.004;

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for p in parts {
        for &b in *p {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn blur_axis(src: &[f64], w: usize, h: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, wk) in kernel.iter().enumerate() {
                let d = k as isize - r;
                let (sx, sy) = if horizontal {
                    ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                } else {
                    (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                };
                let i = (sy * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += wk * src[i + c];
                }
            }
            out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    out
}

/// Separable Gaussian blur with clamped edges.
pub(crate) fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let tmp = blur_axis(&img.data, img.width, img.height, &kernel, true);
    let data = blur_axis(&tmp, img.width, img.height, &kernel, false);
    RgbImage { width: img.width, height: img.height, data }
}

impl Corrector for MockCorrector {
    fn correct(&self, req: &CorrectionRequest) -> Result<RgbImage, CorrectorError> {
        let blurred = gaussian_blur(req.image, 4.0 * req.strength);
        let soft = gaussian_blur(&blurred, UNSHARP_SIGMA);
        let seed = fnv1a(&[
            &self.seed.to_le_bytes(),
            req.view_id.as_bytes(),
            &(req.interval as u64).to_le_bytes(),
            &(req.pass as u64).to_le_bytes(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amp = MOCK_NOISE * req.strength;
        let data = blurred
            .data
            .iter()
            .zip(&soft.data)
            .map(|(b, s)| (b + UNSHARP_AMOUNT * (b - s) + rng.random_range(-amp..=amp)).clamp(0.0, 1.0))
            .collect();
        Ok(RgbImage { width: req.image.width, height: req.image.height, data })
    }
}

/// HTTP corrector: `POST /correct`, `POST /buffer`, `GET /health`.
pub struct ExternalCorrector {
    endpoint: String,
    agent: ureq::Agent,
}

fn transport(e: ureq::Error) -> CorrectorError {
    match e {
        ureq::Error::StatusCode(code) => CorrectorError::Protocol(format!("status {code}")),
        other => CorrectorError::Unreachable(other.to_string()),
    }
}

impl ExternalCorrector {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { endpoint: endpoint.trim_end_matches('/').to_string(), agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.endpoint)
    }
}

impl Corrector for ExternalCorrector {
    fn correct(&self, req: &CorrectionRequest) -> Result<RgbImage, CorrectorError> {
        let png = req.image.encode_png().map_err(|e| CorrectorError::Protocol(e.to_string()))?;
        let resp = self
            .agent
            .post(&self.url("/correct"))
            .header("Content-Type", "image/png")
            .header("X-Strength", req.strength.to_string())
            .header("X-View-Id", req.view_id)
            .header("X-Interval", req.interval.to_string())
            .header("X-Pass", req.pass.to_string())
            .send(&png[..])
            .map_err(transport)?;
        let mut body = Vec::new();
        resp.into_body()
            .into_reader()
            .read_to_end(&mut body)
            .map_err(|e| CorrectorError::Unreachable(e.to_string()))?;
        RgbImage::decode_png(&body).map_err(|e| CorrectorError::Protocol(format!("reply is not a png: {e}")))
    }

    fn push_buffer(&self, manifest: &BufferManifest) -> Result<(), CorrectorError> {
        let json = serde_json::to_vec(manifest).expect("manifest json");
        let resp = self
            .agent
            .post(&self.url("/buffer"))
            .header("Content-Type", "application/json")
            .send(&json[..])
            .map_err(transport)?;
        if resp.status().as_u16() != 204 {
            return Err(CorrectorError::Protocol(format!("/buffer answered {}, expected 204", resp.status())));
        }
        Ok(())
    }

    fn health(&self) -> Result<(), CorrectorError> {
        self.agent.get(&self.url("/health")).call().map_err(|e| CorrectorError::Unreachable(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorKind {
    #[default]
    Identity,
    Mock,
    External,
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectorHandle {
    #[serde(default)]
    pub kind: CorrectorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl Default for CorrectorHandle {
    fn default() -> Self {
        Self::identity()
    }
}

impl CorrectorHandle {
    pub fn identity() -> Self {
        Self { kind: CorrectorKind::Identity, endpoint: None, timeout_secs: default_timeout() }
    }

    pub fn mock() -> Self {
        Self { kind: CorrectorKind::Mock, ..Self::identity() }
    }

    pub fn external(endpoint: impl Into<String>) -> Self {
        Self { kind: CorrectorKind::External, endpoint: Some(endpoint.into()), ..Self::identity() }
    }

    /// Builds the corrector; external ones must answer `/health`.
    pub fn connect(&self, seed: u64) -> Result<Box<dyn Corrector>, CorrectorError> {
        match self.kind {
            CorrectorKind::Identity => Ok(Box::new(IdentityCorrector)),
            CorrectorKind::Mock => Ok(Box::new(MockCorrector { seed })),
            CorrectorKind::External => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| CorrectorError::Config("external corrector needs an endpoint".into()))?;
                let c = ExternalCorrector::new(endpoint, Duration::from_secs(self.timeout_secs));
                c.health()?;
                Ok(Box::new(c))
            }
        }
    }
}
