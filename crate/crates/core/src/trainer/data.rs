//! In-memory training pairs and the seeded batch order.

use std::path::Path;

use bfr_autograd::Tensor;
use rand::seq::SliceRandom;

use crate::degradation::read_manifest;
use crate::degradation::MANIFEST_NAME;
use crate::discriminator::Region;
use crate::error::{invalid, Result};
use crate::image::{batch_to_tensor, load_image, ImageTensor};
use crate::roi::{load_landmarks, Landmarks, RoiBox, RoiConfig};
use crate::seed::rng_for;

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub lq: ImageTensor,
    pub hq: ImageTensor,
    pub landmarks: Option<Landmarks>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Batch tensors plus the region boxes of every item, per region.
pub struct Batch {
    pub indices: Vec<usize>,
    pub lq: Tensor<f32>,
    pub hq: Tensor<f32>,
    pub hq_images: Vec<ImageTensor>,
    pub boxes: Vec<(Region, Vec<RoiBox>)>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(invalid!("dataset is empty"));
        };
        for s in &samples {
            if !s.lq.same_shape(&first.hq) || !s.hq.same_shape(&first.hq) || s.hq.channels() != 3 {
                return Err(invalid!(
                    "sample {} does not match the {}x{} RGB shape of the dataset",
                    s.name,
                    first.hq.height(),
                    first.hq.width()
                ));
            }
        }
        Ok(Self { samples })
    }

    /// Loads a synthesized pair directory; `landmarks` is keyed by the HQ
    /// file name within the directory.
    pub fn load(dir: &Path, landmarks: Option<&Path>) -> Result<Self> {
        let records = read_manifest(&dir.join(MANIFEST_NAME))?;
        let marks = landmarks.map(load_landmarks).transpose()?;
        let samples = records
            .iter()
            .map(|r| {
                let name = Path::new(&r.hq_path)
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(Sample {
                    landmarks: marks
                        .as_ref()
                        .and_then(|m| m.get(&name).or_else(|| m.get(&r.source)).cloned()),
                    name,
                    lq: load_image(dir.join(&r.lq_path))?,
                    hq: load_image(dir.join(&r.hq_path))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.samples
            .first()
            .map(|s| (s.hq.height(), s.hq.width()))
            .unwrap_or((0, 0))
    }

    /// Items of batch `iteration`: consecutive slots of an endless sequence
    /// of seeded per-epoch permutations, so the order depends only on the
    /// seed and the iteration.
    pub fn batch_indices(&self, seed: u64, iteration: u64, batch_size: usize) -> Vec<usize> {
        let n = self.len() as u64;
        let start = iteration * batch_size as u64;
        let mut out = Vec::with_capacity(batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for slot in start..start + batch_size as u64 {
            let epoch = slot / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut order: Vec<usize> = (0..self.len()).collect();
                order.shuffle(&mut rng_for(seed, &format!("batch/epoch/{epoch}")));
                cached = Some((epoch, order));
            }
            out.push(cached.as_ref().expect("filled above").1[(slot % n) as usize]);
        }
        out
    }

    pub fn batch(&self, indices: &[usize], roi: &RoiConfig) -> Result<Batch> {
        let pick = |f: fn(&Sample) -> &ImageTensor| {
            indices
                .iter()
                .map(|&i| f(&self.samples[i]).clone())
                .collect::<Vec<_>>()
        };
        let lq = pick(|s| &s.lq);
        let hq = pick(|s| &s.hq);
        let boxes = Region::ALL
            .iter()
            .map(|&r| {
                let b = indices
                    .iter()
                    .map(|&i| {
                        let s = &self.samples[i];
                        roi.region_box(r, s.hq.height(), s.hq.width(), s.landmarks.as_ref())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((r, b))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            indices: indices.to_vec(),
            lq: batch_to_tensor(&lq)?,
            hq: batch_to_tensor(&hq)?,
            hq_images: hq,
            boxes,
        })
    }
}
