//! Scores that depend on an external feature network.

use bfr_autograd::{Tape, Tensor};
use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::extractor::{ExtractorConfig, FeatureExtractor};
use crate::image::ImageTensor;

pub struct DeepScorer {
    extractor: Box<dyn FeatureExtractor<f64>>,
}

impl DeepScorer {
    pub fn new(cfg: &ExtractorConfig) -> Result<Self> {
        Ok(Self {
            extractor: cfg.build()?,
        })
    }

    pub fn name(&self) -> &str {
        self.extractor.name()
    }

    fn layers(&self, img: &ImageTensor) -> Result<Vec<Tensor<f64>>> {
        let mut tape = Tape::inference();
        let x = tape.constant(img.to_tensor());
        let feats = self.extractor.features(&mut tape, x)?;
        Ok(feats.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Perceptual distance: per layer, features are unit-normalized across
    /// channels at each position, and the squared difference is averaged
    /// over positions; layers contribute equally.
    pub fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        if !a.same_shape(b) {
            return Err(invalid!("deep distance needs equally shaped images"));
        }
        let (fa, fb) = (self.layers(a)?, self.layers(b)?);
        let mut total = 0.0;
        for (ta, tb) in fa.iter().zip(&fb) {
            let (_, c, h, w) = ta.dims4()?;
            let plane = h * w;
            let (da, db) = (ta.data(), tb.data());
            let mut layer = 0.0;
            for p in 0..plane {
                let norm = |d: &[f64]| {
                    (0..c)
                        .map(|ch| d[ch * plane + p].powi(2))
                        .sum::<f64>()
                        .sqrt()
                        + 1e-10
                };
                let (na, nb) = (norm(da), norm(db));
                layer += (0..c)
                    .map(|ch| (da[ch * plane + p] / na - db[ch * plane + p] / nb).powi(2))
                    .sum::<f64>();
            }
            total += layer / plane as f64;
        }
        Ok(total)
    }

    /// Spatially pooled deepest feature, used for set-level statistics.
    pub fn embedding(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let last = self
            .layers(img)?
            .pop()
            .ok_or_else(|| invalid!("extractor produced no features"))?;
        let (_, c, h, w) = last.dims4()?;
        let plane = h * w;
        Ok((0..c)
            .map(|ch| {
                last.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .sum::<f64>()
                    / plane as f64
            })
            .collect())
    }
}

fn gaussian_stats(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mean;
        cov += &c * c.transpose();
    }
    (mean, cov / (n - 1.0))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two embedding sets:
/// `|μa − μb|² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid!("fid needs at least two images per set"));
    }
    if a.iter().chain(b).any(|v| v.len() != a[0].len()) {
        return Err(invalid!("fid embeddings differ in length"));
    }
    let (ma, ca) = gaussian_stats(a);
    let (mb, cb) = gaussian_stats(b);
    let ra = sym_sqrt(&ca);
    let cross = sym_sqrt(&(&ra * &cb * &ra));
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}
