//! Run configuration: one TOML file covering every module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{ChannelSchedule, CodecConfig};
use crate::degradation::DegradationRanges;
use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::metrics::{MetricsConfig, NiqeConfig};
use crate::roi::RoiConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "BFR_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub codec: f64,
    pub disc_global: f64,
    pub disc_local: f64,
    pub generator: f64,
    pub noise_branches: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            codec: 2e-3,
            disc_global: 2e-5,
            disc_local: 2e-3,
            generator: 2e-4,
            noise_branches: 2e-3,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            codec: 0.0,
            disc_global: 0.0,
            disc_local: 0.0,
            generator: 0.0,
            noise_branches: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iterations: u64,
    pub batch_size: usize,
    pub lr: LearningRates,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Fractions of `total_iterations` after which every learning rate is
    /// multiplied by `decay`.
    pub milestones: Vec<f64>,
    pub decay: f64,
    /// R1 penalty weight; only 0 (disabled) is supported.
    pub r1_gamma: f64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 700,
            batch_size: 4,
            lr: LearningRates::default(),
            betas: [0.0, 0.99],
            eps: 1e-8,
            milestones: vec![0.6, 0.8],
            decay: 0.5,
            r1_gamma: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.total_iterations == 0 || self.batch_size == 0 {
            return err("total_iterations and batch_size must be positive".into());
        }
        let lr = &self.lr;
        if [
            lr.codec,
            lr.disc_global,
            lr.disc_local,
            lr.generator,
            lr.noise_branches,
        ]
        .iter()
        .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return err(format!(
                "learning rates must be finite and nonnegative: {lr:?}"
            ));
        }
        let [b1, b2] = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return err(format!(
                "adam betas must lie in [0, 1) and eps be positive, got {:?} / {}",
                self.betas, self.eps
            ));
        }
        let mut prev = 0.0;
        for &m in &self.milestones {
            if !(m > prev && m <= 1.0) {
                return err(format!(
                    "milestones must be strictly increasing in (0, 1]: {:?}",
                    self.milestones
                ));
            }
            prev = m;
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return err(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if self.r1_gamma != 0.0 {
            return err("r1_gamma: R1 regularization is not implemented; leave it at 0".into());
        }
        Ok(())
    }
}

/// Component switches for ablations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// MMRB feature blocks in the codec; plain residual blocks otherwise.
    pub use_mmrb: bool,
    pub use_local_d: bool,
    /// Train the generator's own parameters.
    pub finetune_prior: bool,
    /// Freeze the input-side layers of the global discriminator.
    pub freeze_d: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_mmrb: true,
            use_local_d: true,
            finetune_prior: true,
            freeze_d: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: ChannelSchedule,
    /// Frozen global-discriminator conv layers; unset picks five, or fewer
    /// on shallow networks.
    pub n_frozen: Option<usize>,
    pub roi: RoiConfig,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: ChannelSchedule { base: 8, max: 32 },
            n_frozen: None,
            roi: RoiConfig {
                roi_size: 16,
                ..RoiConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Extractors {
    /// Feature network for the feature-matching term.
    pub content: ExtractorConfig,
    /// Embedding network for the identity term.
    pub identity: ExtractorConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of synthesized pairs (with its manifest).
    pub data_dir: Option<PathBuf>,
    /// JSON-lines landmark file keyed by HQ file name.
    pub landmarks: Option<PathBuf>,
    /// Where checkpoints and the training log are written.
    pub out_dir: Option<PathBuf>,
    /// Tensor containers copied onto matching parameter names at startup.
    pub pretrained: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub codec: CodecConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub degradation: DegradationRanges,
    pub extractors: Extractors,
    pub metrics: MetricsConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// 64×64, 700 iterations, small channel counts.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            codec: CodecConfig::desk(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            degradation: DegradationRanges::default(),
            extractors: Extractors::default(),
            metrics: MetricsConfig {
                niqe: NiqeConfig {
                    patch_size: 32,
                    ..NiqeConfig::default()
                },
                ..MetricsConfig::default()
            },
            paths: Paths::default(),
        }
    }

    /// 512×512, 700k iterations, full-width schedules.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.codec = CodecConfig::paper();
        c.generator = GeneratorConfig::paper();
        c.discriminator = DiscriminatorConfig {
            channels: ChannelSchedule { base: 32, max: 512 },
            n_frozen: Some(5),
            roi: RoiConfig::default(),
        };
        c.train.total_iterations = 700_000;
        c.train.checkpoint_every = 10_000;
        c.metrics.niqe = NiqeConfig::default();
        c
    }

    /// Codec settings with the ablation switch applied.
    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            use_mmrb: self.ablation.use_mmrb,
            ..self.codec.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec_config().validate()?;
        if self.generator.mapping_layers == 0 {
            return Err(Error::Config(
                "generator.mapping_layers must be positive".into(),
            ));
        }
        self.discriminator.roi.validate()?;
        let roi = self.discriminator.roi.roi_size;
        if !roi.is_power_of_two() || roi < 4 {
            return Err(Error::Config(format!(
                "discriminator.roi.roi_size must be a power of two >= 4, got {roi}"
            )));
        }
        self.loss.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        self.degradation.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded. The output
    /// directory and evaluation settings do not affect training and are
    /// left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out_dir = None;
        c.metrics = MetricsConfig::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Dotted names of every configuration key.
    pub fn keys() -> Vec<String> {
        let mut full = Self::paper();
        full.paths = Paths {
            data_dir: Some("data".into()),
            landmarks: Some("landmarks.jsonl".into()),
            out_dir: Some("runs".into()),
            pretrained: Vec::new(),
        };
        full.metrics.deep = Some(ExtractorConfig::Identity);
        let value = toml::Value::try_from(full).expect("config serializes");
        let mut out = Vec::new();
        flatten_keys(&value, "", &mut out);
        out
    }
}

fn flatten_keys(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_keys(child, &key, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}
