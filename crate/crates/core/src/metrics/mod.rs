//! Full-reference (PSNR, SSIM, deep-feature distance, FID) and
//! no-reference (NIQE) image quality scores, plus directory evaluation.

mod deep;
mod niqe;
mod report;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::extractor::ExtractorConfig;
use crate::image::ImageTensor;

pub use deep::{frechet_distance, DeepScorer};
pub use niqe::{
    aggd_fit, ggd_fit, niqe_features, niqe_fit, niqe_fit_dir, niqe_score, NiqeConfig, NiqeModel,
    NIQE_FEATURES,
};
pub use report::{
    evaluate_dirs, render_table, write_report, Aggregate, Counts, ImageScores, MetricReport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// PSNR reported for identical images.
    pub psnr_cap: f64,
    pub ssim: SsimConfig,
    pub niqe: NiqeConfig,
    /// Feature network for LPIPS-style and FID scores; absent means those
    /// columns are reported as unavailable.
    pub deep: Option<ExtractorConfig>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            psnr_cap: 100.0,
            ssim: SsimConfig::default(),
            niqe: NiqeConfig::default(),
            deep: None,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.psnr_cap.is_finite() && self.psnr_cap > 0.0) {
            return Err(Error::Config(format!(
                "psnr_cap must be positive, got {}",
                self.psnr_cap
            )));
        }
        let s = &self.ssim;
        if s.window == 0 || s.window % 2 == 0 || !(s.sigma > 0.0) || !(s.k1 > 0.0) || !(s.k2 > 0.0)
        {
            return Err(Error::Config(format!("invalid ssim settings {s:?}")));
        }
        self.niqe.validate()
    }
}

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(invalid!(
            "shape mismatch {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        ));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(peak² / mse)`, or `cap` when the MSE is zero.
pub fn psnr_from_mse(mse: f64, peak: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        return cap;
    }
    (10.0 * (peak * peak / mse).log10()).min(cap)
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64, cap: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak, cap))
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable correlation keeping only fully covered positions.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * rows[(y + i) * wo + x])
                .sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM over the valid region of a Gaussian window, computed on luma.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, cfg: &SsimConfig) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < cfg.window || w < cfg.window {
        return Err(invalid!(
            "image {h}x{w} smaller than the {0}x{0} ssim window",
            cfg.window
        ));
    }
    let (x, y) = (a.luma(), b.luma());
    let k = gaussian_window(cfg.window, cfg.sigma);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mx, ho, wo) = filter_valid(&x, h, w, &k);
    let (my, ..) = filter_valid(&y, h, w, &k);
    let (sxx, ..) = filter_valid(&prod(&x, &x), h, w, &k);
    let (syy, ..) = filter_valid(&prod(&y, &y), h, w, &k);
    let (sxy, ..) = filter_valid(&prod(&x, &y), h, w, &k);
    let (c1, c2) = (cfg.k1 * cfg.k1, cfg.k2 * cfg.k2);
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total +=
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / (ho * wo) as f64)
}
