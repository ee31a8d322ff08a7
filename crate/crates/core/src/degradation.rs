//! Synthetic degradation: blur, downscale, noise, JPEG, resize back.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{
    jpeg_roundtrip, load_image, resize, save_image, ImageFormat, ImageTensor, ResizeMethod,
};
use crate::seed::{rng_for, rng_from, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Motion,
}

/// Which stages run. A disabled stage is skipped entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub blur: bool,
    pub resize: bool,
    pub noise: bool,
    pub jpeg: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            blur: true,
            resize: true,
            noise: true,
            jpeg: true,
        }
    }
}

impl Stages {
    pub fn none() -> Self {
        Self {
            blur: false,
            resize: false,
            noise: false,
            jpeg: false,
        }
    }
}

/// Sampling ranges, all inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationRanges {
    pub kernel_size: usize,
    pub gaussian_sigma: [f64; 2],
    pub motion_length: [f64; 2],
    pub scale: [f64; 2],
    pub noise: [f64; 2],
    pub jpeg_quality: [u8; 2],
    /// Probability of drawing a Gaussian rather than a motion kernel.
    pub p_gaussian: f64,
    pub stages: Stages,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            kernel_size: 41,
            gaussian_sigma: [0.2, 10.0],
            motion_length: [3.0, 41.0],
            scale: [0.4, 8.0],
            noise: [0.0, 25.0],
            jpeg_quality: [5, 50],
            p_gaussian: 0.5,
            stages: Stages::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] || r[0] < lo {
        return Err(Error::Config(format!(
            "{name} range {:?} must satisfy {lo} <= min <= max",
            r
        )));
    }
    Ok(())
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        check_range("gaussian_sigma", self.gaussian_sigma, f64::MIN_POSITIVE)?;
        check_range("motion_length", self.motion_length, 1.0)?;
        check_range("scale", self.scale, f64::MIN_POSITIVE)?;
        check_range("noise", self.noise, 0.0)?;
        let [qa, qb] = self.jpeg_quality;
        if qa == 0 || qb > 100 || qa > qb {
            return Err(Error::Config(format!(
                "jpeg_quality range {:?} must lie in 1..=100 with min <= max",
                self.jpeg_quality
            )));
        }
        if !(0.0..=1.0).contains(&self.p_gaussian) {
            return Err(Error::Config(format!(
                "p_gaussian must be in [0, 1], got {}",
                self.p_gaussian
            )));
        }
        Ok(())
    }
}

/// One draw of the degradation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub kernel_kind: KernelKind,
    pub kernel_size: usize,
    pub gaussian_sigma: f64,
    pub motion_length: f64,
    /// Degrees in `[0, 180)`, counter-clockwise from the +x axis.
    pub motion_angle: f64,
    pub scale: f64,
    /// Noise standard deviation on the 8-bit scale.
    pub noise_sigma: f64,
    pub jpeg_q: u8,
    pub stages: Stages,
}

impl DegradationParams {
    /// Parameters under which `degrade` is the identity.
    pub fn identity() -> Self {
        Self {
            kernel_kind: KernelKind::Motion,
            kernel_size: 1,
            gaussian_sigma: 1.0,
            motion_length: 1.0,
            motion_angle: 0.0,
            scale: 1.0,
            noise_sigma: 0.0,
            jpeg_q: 100,
            stages: Stages::none(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(invalid!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            ));
        }
        let ok = self.gaussian_sigma > 0.0
            && self.motion_length >= 1.0
            && self.scale > 0.0
            && self.noise_sigma >= 0.0
            && (1..=100).contains(&self.jpeg_q)
            && self.motion_angle.is_finite();
        if !ok {
            return Err(invalid!("degradation parameters out of domain: {self:?}"));
        }
        Ok(())
    }
}

pub fn sample_params(rng: &mut Rng, ranges: &DegradationRanges) -> Result<DegradationParams> {
    ranges.validate()?;
    let uniform = |rng: &mut Rng, r: [f64; 2]| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.gen_range(r[0]..=r[1])
        }
    };
    let kernel_kind = if rng.gen_bool(ranges.p_gaussian) {
        KernelKind::Gaussian
    } else {
        KernelKind::Motion
    };
    let gaussian_sigma = uniform(rng, ranges.gaussian_sigma);
    let motion_length = uniform(rng, ranges.motion_length);
    let motion_angle = rng.gen_range(0.0..180.0);
    let scale = uniform(rng, ranges.scale);
    let noise_sigma = uniform(rng, ranges.noise);
    let jpeg_q = rng.gen_range(ranges.jpeg_quality[0]..=ranges.jpeg_quality[1]);
    Ok(DegradationParams {
        kernel_kind,
        kernel_size: ranges.kernel_size,
        gaussian_sigma,
        motion_length,
        motion_angle,
        scale,
        noise_sigma,
        jpeg_q,
        stages: ranges.stages,
    })
}

/// Square, nonnegative blur kernel whose weights sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major `size × size` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.size + x]
    }

    fn normalized(size: usize, mut weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { size, weights }
    }
}

const MOTION_SUPERSAMPLE: usize = 16;

pub fn make_blur_kernel(params: &DegradationParams) -> Result<BlurKernel> {
    let size = params.kernel_size;
    if size % 2 == 0 {
        return Err(invalid!("kernel_size must be odd, got {size}"));
    }
    let r = (size / 2) as isize;
    match params.kernel_kind {
        KernelKind::Gaussian => {
            let s2 = 2.0 * params.gaussian_sigma * params.gaussian_sigma;
            if s2 <= 0.0 {
                return Err(invalid!("gaussian sigma must be positive"));
            }
            let weights = (-r..=r)
                .flat_map(|y| (-r..=r).map(move |x| (-((x * x + y * y) as f64) / s2).exp()))
                .collect();
            Ok(BlurKernel::normalized(size, weights))
        }
        KernelKind::Motion => {
            // Sample the segment densely and splat each sample onto its
            // nearest pixel; sample positions avoid the exact half-pixel
            // endpoints so a length-1 line lands on the centre only.
            let len = params.motion_length.clamp(1.0, size as f64);
            let theta = params.motion_angle.to_radians();
            let (dx, dy) = (theta.cos(), -theta.sin());
            let n = (len.ceil() as usize).max(1) * MOTION_SUPERSAMPLE;
            let mut weights = vec![0.0; size * size];
            for k in 0..n {
                let t = -len / 2.0 + (k as f64 + 0.5) * len / n as f64;
                let x = ((t * dx).round() as isize).clamp(-r, r);
                let y = ((t * dy).round() as isize).clamp(-r, r);
                weights[((y + r) as usize) * size + (x + r) as usize] += 1.0;
            }
            Ok(BlurKernel::normalized(size, weights))
        }
    }
}

/// Correlates `img` with `kernel`, replicating border pixels.
pub fn blur(img: &ImageTensor, kernel: &BlurKernel) -> Result<ImageTensor> {
    let r = (kernel.size / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = (0..kernel.size)
        .flat_map(|y| (0..kernel.size).map(move |x| (y, x)))
        .filter_map(|(y, x)| {
            let w = kernel.at(y, x);
            (w > 0.0).then_some((y as isize - r, x as isize - r, w))
        })
        .collect();
    let (h, w, c) = (img.height() as isize, img.width() as isize, img.channels());
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    out.par_chunks_mut(w as usize * c)
        .enumerate()
        .for_each(|(y, row)| {
            let mut acc = vec![0.0f64; c];
            for x in 0..w {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for &(dy, dx, wt) in &taps {
                    let sy = (y as isize + dy).clamp(0, h - 1);
                    let sx = (x + dx).clamp(0, w - 1);
                    let base = ((sy * w + sx) as usize) * c;
                    for ch in 0..c {
                        acc[ch] += wt * src[base + ch] as f64;
                    }
                }
                for ch in 0..c {
                    row[x as usize * c + ch] = (acc[ch] as f32).clamp(0.0, 1.0);
                }
            }
        });
    ImageTensor::new(img.height(), img.width(), c, out)
}

/// Size after shrinking by `scale`, never below one pixel.
pub fn intermediate_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let f = |v: usize| ((v as f64 / scale).round() as usize).max(1);
    (f(h), f(w))
}

/// Adds `N(0, (sigma/255)²)` to every sample and clamps into `[0, 1]`.
pub fn add_noise(img: &ImageTensor, sigma: f64, rng: &mut Rng) -> Result<ImageTensor> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal =
        Normal::new(0.0, sigma / 255.0).map_err(|e| invalid!("noise sigma {sigma}: {e}"))?;
    let data = img
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    ImageTensor::new(img.height(), img.width(), img.channels(), data)
}

/// Applies blur, downscaling by `scale`, noise, JPEG and resizes back to
/// the input size, skipping any stage disabled in `params.stages`.
pub fn degrade(hq: &ImageTensor, params: &DegradationParams, rng: &mut Rng) -> Result<ImageTensor> {
    params.validate()?;
    let (h, w) = (hq.height(), hq.width());
    let mut img = hq.clone();
    if params.stages.blur {
        img = blur(&img, &make_blur_kernel(params)?)?;
    }
    if params.stages.resize {
        let (sh, sw) = intermediate_size(h, w, params.scale);
        img = resize(&img, sh, sw, ResizeMethod::Bicubic)?;
    }
    if params.stages.noise {
        img = add_noise(&img, params.noise_sigma, rng)?;
    }
    if params.stages.jpeg {
        img = jpeg_roundtrip(&img, params.jpeg_q)?;
    }
    resize(&img, h, w, ResizeMethod::Bicubic)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: usize,
    pub hq_path: String,
    pub lq_path: String,
    pub source: String,
    pub seed: u64,
    #[serde(flatten)]
    pub params: DegradationParams,
}

#[derive(Clone, Debug)]
pub struct SynthesisJob {
    pub count: usize,
    pub seed: u64,
    /// Square side every HQ image is resized to before degradation.
    pub resolution: Option<usize>,
    pub ranges: DegradationRanges,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && ImageFormat::from_path(&path).is_some() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Index of the HQ source used by each pair: every block of `n` consecutive
/// pairs is a seeded permutation of all sources, so usage stays balanced.
pub fn assign_sources(count: usize, n_sources: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut epoch = 0;
    while out.len() < count {
        let mut order: Vec<usize> = (0..n_sources).collect();
        order.shuffle(&mut rng_for(seed, &format!("synthesize/epoch/{epoch}")));
        out.extend(order.into_iter().take(count - out.len()));
        epoch += 1;
    }
    out
}

/// Writes `hq/`, `lq/` and a manifest under `out_dir`; returns the manifest
/// path. Pair `i` draws from its own stream seeded with `seed + i`. If
/// `out_dir` is created here and any step fails, it is removed again.
pub fn synthesize_pairs(hq_dir: &Path, out_dir: &Path, job: &SynthesisJob) -> Result<PathBuf> {
    job.ranges.validate()?;
    if job.count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    if !hq_dir.is_dir() {
        return Err(Error::io(
            hq_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "HQ directory not found"),
        ));
    }
    let sources = list_images(hq_dir)?;
    if sources.is_empty() {
        return Err(invalid!("no PNG or JPEG images in {}", hq_dir.display()));
    }
    let created = !out_dir.exists();
    let result = write_pairs(&sources, out_dir, job);
    if result.is_err() && created {
        let _ = fs::remove_dir_all(out_dir);
    }
    result
}

fn write_pairs(sources: &[PathBuf], out_dir: &Path, job: &SynthesisJob) -> Result<PathBuf> {
    let images = sources
        .iter()
        .map(|p| {
            let img = load_image(p)?;
            match job.resolution {
                Some(r) => resize(&img, r, r, ResizeMethod::Bicubic),
                None => Ok(img),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    for sub in ["hq", "lq"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let assignment = assign_sources(job.count, images.len(), job.seed);
    let records = assignment
        .par_iter()
        .enumerate()
        .map(|(i, &src)| {
            let seed = job.seed.wrapping_add(i as u64);
            let mut rng = rng_from(seed);
            let params = sample_params(&mut rng, &job.ranges)?;
            let lq = degrade(&images[src], &params, &mut rng)?;
            let name = format!("{i:06}.png");
            let (hq_rel, lq_rel) = (format!("hq/{name}"), format!("lq/{name}"));
            save_image(&images[src], out_dir.join(&hq_rel), ImageFormat::Png, None)?;
            save_image(&lq, out_dir.join(&lq_rel), ImageFormat::Png, None)?;
            let source = sources[src]
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(PairRecord {
                pair_id: i,
                hq_path: hq_rel,
                lq_path: lq_rel,
                source,
                seed,
                params,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
