//! Frame-quality measures: absolute interpolation error, PSNR and SSIM.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compositor::render_frame;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::trainer::LayeredVideoModel;
use crate::video_io::load_sequence;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(pred: &Image, gt: &Image) -> Result<()> {
    if !pred.same_size(gt) {
        return Err(Error::invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(())
}

/// Mean absolute difference over pixels and channels, on the 0–255 scale.
pub fn aie(pred: &Image, gt: &Image) -> Result<f64> {
    check_same(pred, gt)?;
    let sum: f64 = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(255.0 * sum / pred.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1.0; identical images give `+∞`.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    check_same(pred, gt)?;
    let mse: f64 = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable weighted filter keeping only positions where the window fits.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, w, h, taps);
    let mu_b = filter_valid(b, w, h, taps);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, taps);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, taps);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// dynamic range 1, computed per channel and averaged.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_same(pred, gt)?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs both sides ≥ {}, got {}x{}",
            SSIM_WINDOW, pred.width, pred.height
        )));
    }
    if pred.data == gt.data {
        return Ok(1.0);
    }
    let taps = gaussian_taps();
    let s: f64 = (0..3).map(|c| ssim_plane(&pred.channel(c), &gt.channel(c), pred.width, pred.height, &taps)).sum();
    Ok(s / 3.0)
}

/// Scores for one frame. An infinite PSNR is stored as `psnr: null` with
/// `infinite: true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub time: f64,
    pub aie: f64,
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub infinite: bool,
}

impl FrameMetrics {
    pub fn new(time: f64, pred: &Image, gt: &Image) -> Result<Self> {
        let p = psnr(pred, gt)?;
        Ok(Self {
            time,
            aie: aie(pred, gt)?,
            psnr: p.is_finite().then_some(p),
            ssim: ssim(pred, gt)?,
            infinite: p.is_infinite(),
        })
    }

    pub fn psnr_db(&self) -> f64 {
        self.psnr.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub aie: f64,
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub infinite: bool,
}

impl AggregateMetrics {
    pub fn psnr_db(&self) -> f64 {
        self.psnr.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model_id: String,
    pub clip_id: String,
    /// How AIE is computed, since the term has several variants.
    pub aie_definition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    pub aggregate: AggregateMetrics,
    pub metadata: ReportMetadata,
}

impl MetricReport {
    pub fn from_frames(per_frame: Vec<FrameMetrics>, model_id: &str, clip_id: &str) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::invalid("no frames to report on"));
        }
        let n = per_frame.len() as f64;
        let psnr = per_frame.iter().map(|f| f.psnr_db()).sum::<f64>() / n;
        let aggregate = AggregateMetrics {
            aie: per_frame.iter().map(|f| f.aie).sum::<f64>() / n,
            psnr: psnr.is_finite().then_some(psnr),
            ssim: per_frame.iter().map(|f| f.ssim).sum::<f64>() / n,
            infinite: psnr.is_infinite(),
        };
        Ok(Self {
            per_frame,
            aggregate,
            metadata: ReportMetadata {
                model_id: model_id.into(),
                clip_id: clip_id.into(),
                aie_definition: "mean absolute difference over pixels and channels, 0-255 scale".into(),
            },
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Scores `pred[i]` against `gt[i]` at `times[i]`.
pub fn evaluate_frames(pred: &[Image], gt: &[Image], times: &[f64], model_id: &str, clip_id: &str) -> Result<MetricReport> {
    if pred.len() != gt.len() || gt.len() != times.len() {
        return Err(Error::invalid(format!("{} predicted frames, {} ground-truth frames", pred.len(), gt.len())));
    }
    let per_frame = pred
        .iter()
        .zip(gt)
        .zip(times)
        .map(|((p, g), &t)| FrameMetrics::new(t, p, g))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_frames(per_frame, model_id, clip_id)
}

/// Renders the model at every held-out time (original units) and scores it.
pub fn evaluate(model: &LayeredVideoModel, held_out_manifest: impl AsRef<Path>) -> Result<MetricReport> {
    let path = held_out_manifest.as_ref();
    let (gt, times) = load_sequence(path)?;
    let grid = model.meta.grid();
    let mut pred = Vec::with_capacity(gt.len());
    for (img, &t) in gt.iter().zip(&times) {
        if !model.meta.contains_time(t) {
            return Err(Error::invalid(format!(
                "held-out time {} lies outside the model's span [{}, {}]",
                t, model.meta.time_min, model.meta.time_max
            )));
        }
        if img.width != grid.width || img.height != grid.height {
            return Err(Error::invalid(format!(
                "held-out frames are {}x{}, model renders {}x{}",
                img.width, img.height, grid.width, grid.height
            )));
        }
        let tn = model.meta.normalize_time(t).clamp(-1.0, 1.0);
        pred.push(render_frame(model, tn, &grid)?.0);
    }
    evaluate_frames(&pred, &gt, &times, "model", &path.display().to_string())
}
