//! Natural-image-quality evaluator: a multivariate Gaussian over natural
//! scene statistics of pristine patches, compared against the same
//! statistics of a test image.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gaussian_window;
use crate::degradation::list_images;
use crate::error::{invalid, Error, Result};
use crate::image::{load_image, resize, ImageTensor, ResizeMethod};

/// Features per patch: 18 per scale over two scales.
pub const NIQE_FEATURES: usize = 36;

const MSCN_WINDOW: usize = 7;
const MSCN_SIGMA: f64 = 7.0 / 6.0;
const MIN_PRISTINE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NiqeConfig {
    /// Side of the square patches at full scale; must be even.
    pub patch_size: usize,
    /// Pristine patches sharper than this fraction of the sharpest patch
    /// in their image are kept.
    pub sharpness_threshold: f64,
    /// Ridge added to a degenerate pristine covariance.
    pub epsilon: f64,
}

impl Default for NiqeConfig {
    fn default() -> Self {
        Self {
            patch_size: 96,
            sharpness_threshold: 0.75,
            epsilon: 1e-6,
        }
    }
}

impl NiqeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 8 || self.patch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "niqe patch_size must be even and at least 8, got {}",
                self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.sharpness_threshold) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid niqe settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiqeModel {
    pub mean: Vec<f64>,
    /// Row-major `NIQE_FEATURES × NIQE_FEATURES`.
    pub covariance: Vec<f64>,
    pub patch_size: usize,
    pub patches: usize,
    /// Whether the fitted covariance needed the `εI` ridge.
    pub regularized: bool,
}

fn gamma_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=9800)
            .map(|i| {
                let g = 0.2 + i as f64 * 0.001;
                let r =
                    libm::tgamma(2.0 / g).powi(2) / (libm::tgamma(1.0 / g) * libm::tgamma(3.0 / g));
                (g, r)
            })
            .collect()
    })
}

fn closest_shape(target: f64) -> f64 {
    let mut best = (f64::INFINITY, 0.2);
    for &(g, r) in gamma_table() {
        let d = (r - target).abs();
        if d < best.0 {
            best = (d, g);
        }
    }
    best.1
}

/// Moment-matched generalized Gaussian: `(shape, variance)`.
pub fn ggd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let abs_mean = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if var <= 0.0 {
        return (10.0, 0.0);
    }
    (closest_shape(abs_mean * abs_mean / var), var)
}

/// Moment-matched asymmetric generalized Gaussian:
/// `(shape, mean, left variance, right variance)`.
pub fn aggd_fit(x: &[f64]) -> (f64, f64, f64, f64) {
    let side = |keep: fn(f64) -> bool| {
        let (s, c) = x
            .iter()
            .filter(|v| keep(**v))
            .fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    };
    let left_var = side(|v| v < 0.0);
    let right_var = side(|v| v > 0.0);
    let n = x.len() as f64;
    let abs_mean = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    let sq_mean = x.iter().map(|v| v * v).sum::<f64>() / n;
    if left_var <= 0.0 || right_var <= 0.0 || sq_mean <= 0.0 {
        return (10.0, 0.0, left_var, right_var);
    }
    let (ls, rs) = (left_var.sqrt(), right_var.sqrt());
    let gh = ls / rs;
    let r = abs_mean * abs_mean / sq_mean;
    let rnorm = r * (gh.powi(3) + 1.0) * (gh + 1.0) / (gh * gh + 1.0).powi(2);
    let alpha = closest_shape(rnorm);
    let g1 = libm::tgamma(1.0 / alpha);
    let spread = (g1 / libm::tgamma(3.0 / alpha)).sqrt();
    let mean = (rs - ls) * spread * libm::tgamma(2.0 / alpha) / g1;
    (alpha, mean, left_var, right_var)
}

/// Same-size separable correlation with replicated borders.
fn filter_replicate(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * plane[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * rows[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Mean-subtracted contrast-normalized coefficients and the local
/// deviation map, on a 0..255 plane.
fn mscn(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let k = gaussian_window(MSCN_WINDOW, MSCN_SIGMA);
    let mu = filter_replicate(plane, h, w, &k);
    let sq: Vec<f64> = plane.iter().map(|v| v * v).collect();
    let mu_sq = filter_replicate(&sq, h, w, &k);
    let sigma: Vec<f64> = mu
        .iter()
        .zip(&mu_sq)
        .map(|(m, s)| (s - m * m).abs().sqrt())
        .collect();
    let coeffs = plane
        .iter()
        .zip(&mu)
        .zip(&sigma)
        .map(|((v, m), s)| (v - m) / (s + 1.0))
        .collect();
    (coeffs, sigma)
}

/// The 18 statistics of one MSCN patch.
fn patch_features(patch: &[f64], p: usize, out: &mut Vec<f64>) {
    let (alpha, var) = ggd_fit(patch);
    out.push(alpha);
    out.push(var);
    let at = |y: usize, x: usize| patch[(y % p) * p + x % p];
    for (dy, dx) in [(0, 1), (1, 0), (1, 1), (1, p - 1)] {
        let prod: Vec<f64> = (0..p * p)
            .map(|i| patch[i] * at(i / p + dy, i % p + dx))
            .collect();
        let (a, m, l, r) = aggd_fit(&prod);
        out.extend([a, m, l, r]);
    }
}

fn extract_patch(plane: &[f64], w: usize, p: usize, py: usize, px: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(p * p);
    for y in 0..p {
        let row = (py * p + y) * w + px * p;
        out.extend_from_slice(&plane[row..row + p]);
    }
    out
}

/// Per-patch feature vectors in raster order, each paired with the mean
/// local deviation (sharpness) of its full-scale patch.
pub fn niqe_features(img: &ImageTensor, cfg: &NiqeConfig) -> Result<Vec<(Vec<f64>, f64)>> {
    let p = cfg.patch_size;
    let (h, w) = (img.height(), img.width());
    let (ny, nx) = (h / p, w / p);
    if ny * nx < 2 {
        return Err(invalid!(
            "image {h}x{w} holds fewer than two {p}x{p} patches"
        ));
    }
    let (ch, cw) = (ny * p, nx * p);
    let luma = img.luma();
    let mut full = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        full.extend(luma[y * w..y * w + cw].iter().map(|v| v * 255.0));
    }
    let small_img = ImageTensor::new(ch, cw, 1, full.iter().map(|v| (v / 255.0) as f32).collect())?;
    let small_img = resize(&small_img, ch / 2, cw / 2, ResizeMethod::Bicubic)?;
    let small: Vec<f64> = small_img.data().iter().map(|&v| v as f64 * 255.0).collect();

    let (m1, s1) = mscn(&full, ch, cw);
    let (m2, _) = mscn(&small, ch / 2, cw / 2);
    let mut out = Vec::with_capacity(ny * nx);
    for py in 0..ny {
        for px in 0..nx {
            let mut f = Vec::with_capacity(NIQE_FEATURES);
            patch_features(&extract_patch(&m1, cw, p, py, px), p, &mut f);
            patch_features(&extract_patch(&m2, cw / 2, p / 2, py, px), p / 2, &mut f);
            let sharp = extract_patch(&s1, cw, p, py, px).iter().sum::<f64>() / (p * p) as f64;
            out.push((f, sharp));
        }
    }
    Ok(out)
}

fn mean_cov(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    (mean, cov)
}

/// Fits the pristine model from images (at least ten).
pub fn niqe_fit(images: &[ImageTensor], cfg: &NiqeConfig) -> Result<NiqeModel> {
    cfg.validate()?;
    if images.len() < MIN_PRISTINE {
        return Err(invalid!(
            "niqe needs at least {MIN_PRISTINE} pristine images, got {}",
            images.len()
        ));
    }
    let per_image: Vec<Vec<(Vec<f64>, f64)>> = images
        .par_iter()
        .map(|img| niqe_features(img, cfg))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for patches in per_image {
        let max = patches.iter().map(|(_, s)| *s).fold(0.0, f64::max);
        rows.extend(
            patches
                .into_iter()
                .filter(|(_, s)| *s > cfg.sharpness_threshold * max)
                .map(|(f, _)| f),
        );
    }
    if rows.len() < 2 {
        return Err(invalid!("only {} sharp pristine patches", rows.len()));
    }
    let (mean, mut cov) = mean_cov(&rows);
    let eig = cov.clone().symmetric_eigen();
    let scale = cov.trace().abs().max(1.0);
    let regularized = eig.eigenvalues.iter().any(|&l| l <= cfg.epsilon * scale);
    if regularized {
        log::warn!(
            "niqe pristine covariance is degenerate; adding {}·I",
            cfg.epsilon
        );
        for i in 0..NIQE_FEATURES {
            cov[(i, i)] += cfg.epsilon;
        }
    }
    Ok(NiqeModel {
        mean: mean.iter().copied().collect(),
        covariance: cov.transpose().iter().copied().collect(),
        patch_size: cfg.patch_size,
        patches: rows.len(),
        regularized,
    })
}

pub fn niqe_fit_dir(dir: &Path, cfg: &NiqeConfig) -> Result<NiqeModel> {
    let images = list_images(dir)?
        .iter()
        .map(load_image)
        .collect::<Result<Vec<_>>>()?;
    niqe_fit(&images, cfg)
}

/// Mahalanobis-style distance between the pristine model and the MVG of
/// the test image's patches; lower is better.
pub fn niqe_score(img: &ImageTensor, model: &NiqeModel) -> Result<f64> {
    let cfg = NiqeConfig {
        patch_size: model.patch_size,
        ..NiqeConfig::default()
    };
    let rows: Vec<Vec<f64>> = niqe_features(img, &cfg)?
        .into_iter()
        .map(|(f, _)| f)
        .collect();
    let (mean, cov) = mean_cov(&rows);
    let d = NIQE_FEATURES;
    if model.mean.len() != d || model.covariance.len() != d * d {
        return Err(invalid!("niqe model has the wrong feature dimension"));
    }
    let pristine = DMatrix::from_row_slice(d, d, &model.covariance);
    let pooled = (pristine + cov) * 0.5;
    let inv = pooled
        .pseudo_inverse(1e-12)
        .map_err(|e| invalid!("niqe pseudo-inverse failed: {e}"))?;
    let diff = DVector::from_column_slice(&model.mean) - mean;
    let q = (diff.transpose() * inv * &diff)[(0, 0)];
    Ok(q.max(0.0).sqrt())
}
