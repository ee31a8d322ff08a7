//! Fixed feature extractors for the content and identity losses and the
//! deep metrics.

use std::path::{Path, PathBuf};

use bfr_autograd::{Float, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{invalid, Error, Result};
use crate::nn::{self, init_conv};
use crate::seed::rng_for;

/// A deterministic, non-trainable network evaluated on `[N, 3, H, W]`
/// images in `[0, 1]`.
pub trait FeatureExtractor<T: Float>: Send + Sync {
    fn name(&self) -> &str;

    /// Selected intermediate activations, input side first.
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>>;

    /// Per-image embedding `[N, D]`; by default the flattened last feature.
    fn embed(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let last = *self
            .features(tape, x)?
            .last()
            .ok_or_else(|| invalid!("{} produced no features", self.name()))?;
        let n = tape.shape(last)[0];
        let d = tape.value(last).numel() / n;
        Ok(tape.reshape(last, &[n, d])?)
    }
}

/// `ψ(x) = x`: a single feature layer equal to the image.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl<T: Float> FeatureExtractor<T> for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, _tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }
}

/// Stack of 3×3 convolutions with leaky ReLU; every layer's activation is
/// a selected feature. Weights are either seeded random projections or
/// loaded from a tensor container holding `layer{i}.weight`/`.bias`.
#[derive(Clone, Debug)]
pub struct ConvStack<T: Float> {
    name: String,
    strides: Vec<usize>,
    store: ParamStore<T>,
}

const SLOPE: f64 = 0.2;

impl<T: Float> ConvStack<T> {
    pub fn random(layers: usize, channels: usize, seed: u64) -> Result<Self> {
        if layers == 0 || channels == 0 {
            return Err(Error::Config(
                "extractor needs at least one layer and channel".into(),
            ));
        }
        let mut rng = rng_for(seed, "extractor/random");
        let mut store = ParamStore::new();
        let mut prev = 3;
        for i in 0..layers {
            init_conv(
                &mut store,
                &format!("layer{i}"),
                (channels, prev, 3),
                SLOPE,
                &mut rng,
            )?;
            prev = channels;
        }
        let strides = (0..layers).map(|i| if i == 0 { 1 } else { 2 }).collect();
        Ok(Self {
            name: format!("random-conv{layers}x{channels}"),
            strides,
            store,
        })
    }

    /// Loads weights from a container; `strides` (one per layer) are read
    /// from the metadata key `strides`, defaulting to 1 then 2.
    pub fn load(path: &Path) -> Result<Self> {
        let (f32_store, meta) = container::read(path)?;
        let layers = (0..)
            .take_while(|i| f32_store.contains(&format!("layer{i}.weight")))
            .count();
        if layers == 0 {
            return Err(Error::Checkpoint(format!(
                "{}: no layer0.weight entry",
                path.display()
            )));
        }
        let strides = match meta.get("strides") {
            Some(v) => serde_json::from_value::<Vec<usize>>(v.clone())?,
            None => (0..layers).map(|i| if i == 0 { 1 } else { 2 }).collect(),
        };
        if strides.len() != layers || strides.contains(&0) {
            return Err(Error::Checkpoint(format!(
                "{}: {} strides for {layers} layers",
                path.display(),
                strides.len()
            )));
        }
        let mut prev = 3;
        for i in 0..layers {
            let s = f32_store.get(&format!("layer{i}.weight"))?.shape().to_vec();
            if s.len() != 4 || s[1] != prev || s[2] != s[3] || s[2] % 2 == 0 {
                return Err(Error::Checkpoint(format!(
                    "{}: layer{i}.weight has shape {s:?}",
                    path.display()
                )));
            }
            prev = s[0];
        }
        Ok(Self {
            name: format!("pretrained:{}", path.display()),
            strides,
            store: f32_store.cast(),
        })
    }
}

impl<T: Float> FeatureExtractor<T> for ConvStack<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.strides.len());
        for (i, &s) in self.strides.iter().enumerate() {
            h = nn::conv(tape, &self.store, h, &format!("layer{i}"), s)?;
            h = tape.leaky_relu(h, SLOPE);
            out.push(h);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum ExtractorConfig {
    Identity,
    Random {
        layers: usize,
        channels: usize,
        seed: u64,
    },
    Pretrained {
        path: PathBuf,
    },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self::Identity
    }
}

impl ExtractorConfig {
    pub fn build<T: Float>(&self) -> Result<Box<dyn FeatureExtractor<T>>> {
        Ok(match self {
            Self::Identity => Box::new(Identity),
            Self::Random {
                layers,
                channels,
                seed,
            } => Box::new(ConvStack::<T>::random(*layers, *channels, *seed)?),
            Self::Pretrained { path } => Box::new(ConvStack::<T>::load(path)?),
        })
    }
}
