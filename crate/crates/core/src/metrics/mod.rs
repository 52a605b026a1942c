//! Image-consistency metrics restricted to a keep region, plus delegating
//! wrappers for perceptual and alignment scores computed by a metric service.
//!
//! PSNR and SSIM are native. SSIM uses an 11x11 Gaussian window (σ = 1.5)
//! evaluated only where the window fits inside the image; the per-pixel map
//! is averaged over the RGB channels and then over valid keep pixels.

mod report;

pub use report::{psnr_serde, MetricReport};

use serde::Serialize;
use thiserror::Error;

use crate::backends::http::Transport;
use crate::backends::wire::{MetricKind, MetricRequest, MetricResponse};
use crate::backends::{checked_judge, BackendEndpoint, BackendError, Reasoner};
use crate::image::{BinaryMask, Dims, ImageBuf};
use crate::prompt::Instruction;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
pub const PSNR_PEAK: f64 = 255.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("image dimensions differ: {0} vs {1}")]
    DimMismatch(Dims, Dims),
    #[error("keep region selects no pixels")]
    EmptyKeepRegion,
    #[error("image {0} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    ImageTooSmall(Dims),
    #[error("no samples to aggregate")]
    EmptySamples,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Pixels over which consistency is measured.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeepRegion {
    Full,
    /// Set bits are evaluated.
    Mask(BinaryMask),
}

impl KeepRegion {
    /// Keep region for a ground-truth edit mask: everything outside it.
    pub fn outside(edit_mask: &BinaryMask) -> Self {
        KeepRegion::Mask(edit_mask.complement())
    }

    fn check(&self, dims: Dims) -> Result<(), MetricError> {
        if let KeepRegion::Mask(m) = self {
            if m.dims() != dims {
                return Err(MetricError::DimMismatch(m.dims(), dims));
            }
            if m.is_empty() {
                return Err(MetricError::EmptyKeepRegion);
            }
        }
        Ok(())
    }

    fn keeps(&self, index: usize) -> bool {
        match self {
            KeepRegion::Full => true,
            KeepRegion::Mask(m) => m.bits()[index],
        }
    }
}

fn check_pair(x: &ImageBuf, y: &ImageBuf) -> Result<(), MetricError> {
    if x.dims() != y.dims() {
        return Err(MetricError::DimMismatch(x.dims(), y.dims()));
    }
    Ok(())
}

/// PSNR in dB over the keep pixels (all three channels). Identical inputs
/// give `f64::INFINITY`.
pub fn masked_psnr(x: &ImageBuf, y: &ImageBuf, keep: &KeepRegion) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    keep.check(x.dims())?;
    let mut sum = 0u64;
    let mut count = 0u64;
    for (i, (a, b)) in x
        .pixels()
        .chunks_exact(3)
        .zip(y.pixels().chunks_exact(3))
        .enumerate()
    {
        if keep.keeps(i) {
            for c in 0..3 {
                let d = a[c] as i64 - b[c] as i64;
                sum += (d * d) as u64;
            }
            count += 3;
        }
    }
    if sum == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = sum as f64 / count as f64;
    Ok(10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Horizontal-then-vertical valid convolution of a plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * row[x + k];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * horiz[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// SSIM from local statistics.
pub fn ssim_from_moments(mu_x: f64, mu_y: f64, var_x: f64, var_y: f64, cov: f64) -> f64 {
    ((2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2))
}

/// Mean SSIM over keep pixels whose window lies fully inside the image.
pub fn masked_ssim(x: &ImageBuf, y: &ImageBuf, keep: &KeepRegion) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    keep.check(x.dims())?;
    let (w, h) = (x.width() as usize, x.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::ImageTooSmall(x.dims()));
    }
    let taps = gaussian_window();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let half = SSIM_WINDOW / 2;
    let mut map = vec![0.0; ow * oh];

    for c in 0..3 {
        let px: Vec<f64> = x.pixels().iter().skip(c).step_by(3).map(|v| *v as f64).collect();
        let py: Vec<f64> = y.pixels().iter().skip(c).step_by(3).map(|v| *v as f64).collect();
        let xx: Vec<f64> = px.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = py.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = px.iter().zip(&py).map(|(a, b)| a * b).collect();
        let mu_x = filter_valid(&px, w, h, &taps);
        let mu_y = filter_valid(&py, w, h, &taps);
        let e_xx = filter_valid(&xx, w, h, &taps);
        let e_yy = filter_valid(&yy, w, h, &taps);
        let e_xy = filter_valid(&xy, w, h, &taps);
        for i in 0..map.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            map[i] += ssim_from_moments(
                mx,
                my,
                e_xx[i] - mx * mx,
                e_yy[i] - my * my,
                e_xy[i] - mx * my,
            );
        }
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..oh {
        for ox in 0..ow {
            let center = (oy + half) * w + ox + half;
            if keep.keeps(center) {
                total += map[oy * ow + ox] / 3.0;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(MetricError::EmptyKeepRegion);
    }
    Ok(total / count as f64)
}

/// Perceptual distance and text alignment computed by an external service.
pub trait MetricBackend: Send + Sync {
    fn lpips(&self, a: &ImageBuf, b: &ImageBuf) -> Result<f64, BackendError>;
    fn clip(&self, image: &ImageBuf, text: &str) -> Result<f64, BackendError>;
}

/// LPIPS restricted to the keep region: pixels outside it are copied from
/// `x` into both inputs, so only keep-region differences can register.
/// Differences still bleed across the boundary through the network's
/// receptive field.
pub fn lpips(
    x: &ImageBuf,
    y: &ImageBuf,
    keep: &KeepRegion,
    backend: &dyn MetricBackend,
) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    keep.check(x.dims())?;
    let value = match keep {
        KeepRegion::Full => backend.lpips(x, y)?,
        KeepRegion::Mask(_) => backend.lpips(x, &neutralize_outside(x, y, keep))?,
    };
    if !(value.is_finite() && value >= 0.0) {
        return Err(BackendError::BadResponse(format!("LPIPS value {value} is not a distance")).into());
    }
    Ok(value)
}

/// `y` with every non-keep pixel replaced by the matching pixel of `x`.
pub fn neutralize_outside(x: &ImageBuf, y: &ImageBuf, keep: &KeepRegion) -> ImageBuf {
    let mut px = y.pixels().to_vec();
    for (i, (dst, src)) in px
        .chunks_exact_mut(3)
        .zip(x.pixels().chunks_exact(3))
        .enumerate()
    {
        if !keep.keeps(i) {
            dst.copy_from_slice(src);
        }
    }
    ImageBuf::new(y.width(), y.height(), px).expect("same dims")
}

pub fn clip_alignment(
    y: &ImageBuf,
    instruction: &Instruction,
    backend: &dyn MetricBackend,
) -> Result<f64, MetricError> {
    let v = backend.clip(y, instruction.as_str())?;
    if !v.is_finite() {
        return Err(BackendError::BadResponse(format!("CLIP value {v} is not finite")).into());
    }
    Ok(v)
}

/// Judge verdict for one edit.
pub fn success(
    x: &ImageBuf,
    y: &ImageBuf,
    instruction: &Instruction,
    reasoner: &dyn Reasoner,
) -> Result<bool, MetricError> {
    Ok(checked_judge(reasoner, x, y, instruction)?.success)
}

/// Fraction of successful samples.
pub fn success_rate(verdicts: &[bool]) -> Result<f64, MetricError> {
    if verdicts.is_empty() {
        return Err(MetricError::EmptySamples);
    }
    Ok(verdicts.iter().filter(|v| **v).count() as f64 / verdicts.len() as f64)
}

/// Metric service speaking `POST {base}/v1/metric`.
#[derive(Debug)]
pub struct HttpMetricBackend {
    transport: Transport,
}

impl HttpMetricBackend {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        Ok(Self {
            transport: Transport::new(endpoint)?,
        })
    }

    fn request(&self, req: &MetricRequest) -> Result<f64, BackendError> {
        self.transport
            .post_validated("/v1/metric", req, |r: MetricResponse| {
                r.value.as_f64().ok_or_else(|| {
                    BackendError::BadResponse(format!("metric value {} is not a number", r.value))
                })
            })
    }
}

fn b64(img: &ImageBuf) -> Result<String, BackendError> {
    img.to_base64_png()
        .map_err(|e| BackendError::Precondition(e.to_string()))
}

impl MetricBackend for HttpMetricBackend {
    fn lpips(&self, a: &ImageBuf, b: &ImageBuf) -> Result<f64, BackendError> {
        self.request(&MetricRequest {
            kind: MetricKind::Lpips,
            image_a: b64(a)?,
            image_b: Some(b64(b)?),
            text: None,
        })
    }

    fn clip(&self, image: &ImageBuf, text: &str) -> Result<f64, BackendError> {
        self.request(&MetricRequest {
            kind: MetricKind::Clip,
            image_a: b64(image)?,
            image_b: None,
            text: Some(text.to_owned()),
        })
    }
}

/// Which metrics a run computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct MetricFlags {
    pub psnr: bool,
    pub ssim: bool,
    pub lpips: bool,
    pub clip: bool,
    pub succ: bool,
}

impl Default for MetricFlags {
    fn default() -> Self {
        Self {
            psnr: true,
            ssim: true,
            lpips: false,
            clip: false,
            succ: false,
        }
    }
}

impl MetricFlags {
    /// Parses a comma-separated list such as `psnr,ssim,succ`.
    pub fn parse_list(list: &str) -> Result<Self, String> {
        let mut f = MetricFlags {
            psnr: false,
            ssim: false,
            lpips: false,
            clip: false,
            succ: false,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.to_ascii_lowercase().as_str() {
                "psnr" => f.psnr = true,
                "ssim" => f.ssim = true,
                "lpips" => f.lpips = true,
                "clip" => f.clip = true,
                "succ" => f.succ = true,
                other => return Err(format!("unknown metric `{other}`")),
            }
        }
        Ok(f)
    }
}
