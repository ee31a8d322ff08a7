//! Asymmetric encoder/decoder producing the latent code, the per-scale
//! features fed to the generator and per-scale reconstructions.

use bfr_autograd::{Float, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{batch_to_tensor, resize, ImageTensor, ResizeMethod};
use crate::mmrb::{FeatureBlock, PRELU_INIT};
use crate::nn::{self, init_const, init_conv, init_linear, is_pow2, ladder, prelu};
use crate::seed::Rng;

/// Channel count per resolution: `min(max, base · 2^level)` where level is
/// the number of halvings from the top resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSchedule {
    pub base: usize,
    pub max: usize,
}

impl ChannelSchedule {
    pub fn at(&self, top: usize, res: usize) -> usize {
        let level = (top / res).trailing_zeros();
        self.base.saturating_mul(1 << level).min(self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub base_resolution: usize,
    pub min_resolution: usize,
    pub channels: ChannelSchedule,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub latent_dim: usize,
    /// Emit one latent vector per generator block instead of one shared one.
    pub per_block_latents: bool,
    /// Set from the run's ablation switches.
    #[serde(skip)]
    pub use_mmrb: bool,
    pub shared_mmrb_weights: bool,
    /// Smallest scale whose features feed the generator.
    pub noise_min_resolution: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl CodecConfig {
    pub fn desk() -> Self {
        Self {
            base_resolution: 64,
            min_resolution: 4,
            channels: ChannelSchedule { base: 4, max: 32 },
            encoder_blocks: 2,
            decoder_blocks: 1,
            latent_dim: 32,
            per_block_latents: false,
            use_mmrb: true,
            shared_mmrb_weights: false,
            noise_min_resolution: 8,
        }
    }

    pub fn paper() -> Self {
        Self {
            base_resolution: 512,
            channels: ChannelSchedule { base: 32, max: 512 },
            latent_dim: 512,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b, m) = (self.base_resolution, self.min_resolution);
        if !is_pow2(b) || !is_pow2(m) || b < m || m < 4 {
            return Err(Error::Config(format!(
                "resolutions must be powers of two with base >= min >= 4, got {b} and {m}"
            )));
        }
        if self.encoder_blocks != self.decoder_blocks + 1 {
            return Err(Error::Config(format!(
                "encoder needs exactly one more block per scale than the decoder, got {} and {}",
                self.encoder_blocks, self.decoder_blocks
            )));
        }
        if self.latent_dim == 0 || self.channels.base == 0 || self.channels.max == 0 {
            return Err(Error::Config(
                "latent_dim and channel counts must be positive".into(),
            ));
        }
        if self.use_mmrb && ladder(b, m).iter().any(|&r| self.channels_at(r) % 2 != 0) {
            return Err(Error::Config(
                "MMRB needs an even channel count at every scale".into(),
            ));
        }
        let n = self.noise_min_resolution;
        if !is_pow2(n) || n <= m || n > b {
            return Err(Error::Config(format!(
                "noise_min_resolution {n} must be a power of two in ({m}, {b}]"
            )));
        }
        Ok(())
    }

    pub fn channels_at(&self, res: usize) -> usize {
        self.channels.at(self.base_resolution, res)
    }

    /// Encoder scales, fine to coarse.
    pub fn scales(&self) -> Vec<usize> {
        ladder(self.base_resolution, self.min_resolution)
    }

    /// Scales whose decoder features drive the generator, coarse to fine.
    pub fn noise_scales(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .scales()
            .into_iter()
            .filter(|&r| r >= self.noise_min_resolution)
            .collect();
        s.reverse();
        s
    }

    /// Generator blocks: one at 4×4 plus one per doubling up to the base.
    pub fn generator_blocks(&self) -> usize {
        ladder(self.base_resolution, 4).len()
    }

    pub fn latent_count(&self) -> usize {
        if self.per_block_latents {
            self.generator_blocks()
        } else {
            1
        }
    }

    fn block(&self, side: &str, res: usize, i: usize) -> Result<FeatureBlock> {
        FeatureBlock::new(
            format!("codec/{side}{res}.{i}"),
            self.channels_at(res),
            self.use_mmrb,
            self.shared_mmrb_weights,
        )
    }
}

/// Encoder output: latent codes `[N, latent_count · latent_dim]` and skip
/// features, fine to coarse.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub latent: Var,
    pub skips: Vec<Var>,
}

/// Decoder output: generator features keyed by resolution (coarse to fine)
/// and a 3-channel reconstruction at every scale (coarse to fine).
#[derive(Clone, Debug)]
pub struct Decoded {
    pub features: Vec<(usize, Var)>,
    pub recons: Vec<(usize, Var)>,
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
}

impl Codec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        let cfg = &self.config;
        let top = cfg.channels_at(cfg.base_resolution);
        init_conv(store, "codec/from_rgb", (top, 3, 1), PRELU_INIT, rng)?;
        init_const(store, "codec/from_rgb.act", &[1], PRELU_INIT)?;
        for &r in &cfg.scales() {
            for i in 0..cfg.encoder_blocks {
                cfg.block("enc", r, i)?.init(store, rng)?;
            }
            if r > cfg.min_resolution {
                init_conv(
                    store,
                    &format!("codec/down{r}"),
                    (cfg.channels_at(r / 2), cfg.channels_at(r), 3),
                    PRELU_INIT,
                    rng,
                )?;
                init_const(store, &format!("codec/down{r}.act"), &[1], PRELU_INIT)?;
            }
        }
        let m = cfg.min_resolution;
        let flat = cfg.channels_at(m) * m * m;
        let out = cfg.latent_dim * cfg.latent_count();
        init_linear(
            store,
            "codec/latent",
            out,
            flat,
            1.0 / (flat as f64).sqrt(),
            rng,
        )?;
        init_const(store, "codec/latent.bias", &[out], 0.0)?;
        for &r in cfg.scales().iter().rev() {
            let c = cfg.channels_at(r);
            if r > m {
                init_conv(
                    store,
                    &format!("codec/merge{r}"),
                    (c, cfg.channels_at(r / 2) + c, 3),
                    PRELU_INIT,
                    rng,
                )?;
                init_const(store, &format!("codec/merge{r}.act"), &[1], PRELU_INIT)?;
            }
            for i in 0..cfg.decoder_blocks {
                cfg.block("dec", r, i)?.init(store, rng)?;
            }
            init_conv(store, &format!("codec/to_rgb{r}"), (3, c, 1), 1.0, rng)?;
            init_const(store, &format!("codec/to_rgb{r}.bias"), &[3], 0.5)?;
        }
        Ok(())
    }

    pub fn encode<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Encoded> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        let b = cfg.base_resolution;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != b || shape[3] != b {
            return Err(invalid!(
                "codec expects [N, 3, {b}, {b}] input, got {shape:?}"
            ));
        }
        let mut h = nn::conv(tape, store, x, "codec/from_rgb", 1)?;
        h = prelu(tape, store, h, "codec/from_rgb.act")?;
        let mut skips = Vec::new();
        for &r in &cfg.scales() {
            for i in 0..cfg.encoder_blocks {
                h = cfg.block("enc", r, i)?.forward(tape, store, h)?;
            }
            skips.push(h);
            if r > cfg.min_resolution {
                h = nn::conv(tape, store, h, &format!("codec/down{r}"), 2)?;
                h = prelu(tape, store, h, &format!("codec/down{r}.act"))?;
            }
        }
        let n = shape[0];
        let coarse = *skips.last().expect("at least one scale");
        let flat_len = tape.value(coarse).numel() / n;
        let flat = tape.reshape(coarse, &[n, flat_len])?;
        let latent = nn::linear(tape, store, flat, "codec/latent")?;
        Ok(Encoded { latent, skips })
    }

    pub fn decode<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        enc: &Encoded,
    ) -> Result<Decoded> {
        let cfg = &self.config;
        let scales = cfg.scales();
        if enc.skips.len() != scales.len() {
            return Err(invalid!(
                "decoder expects {} skip maps, got {}",
                scales.len(),
                enc.skips.len()
            ));
        }
        let mut features = Vec::new();
        let mut recons = Vec::new();
        let mut h: Option<Var> = None;
        for (&r, &skip) in scales.iter().zip(&enc.skips).rev() {
            let mut y = match h {
                None => skip,
                Some(prev) => {
                    let up = tape.upsample2x(prev)?;
                    let cat = tape.concat1(up, skip)?;
                    let m = nn::conv(tape, store, cat, &format!("codec/merge{r}"), 1)?;
                    prelu(tape, store, m, &format!("codec/merge{r}.act"))?
                }
            };
            for i in 0..cfg.decoder_blocks {
                y = cfg.block("dec", r, i)?.forward(tape, store, y)?;
            }
            recons.push((r, nn::conv(tape, store, y, &format!("codec/to_rgb{r}"), 1)?));
            if r >= cfg.noise_min_resolution {
                features.push((r, y));
            }
            h = Some(y);
        }
        Ok(Decoded { features, recons })
    }
}

/// Bicubic targets for the per-scale reconstructions, coarse to fine.
pub fn recon_targets<T: Float>(
    gt: &[ImageTensor],
    scales: &[usize],
) -> Result<Vec<(usize, Tensor<T>)>> {
    let mut out = Vec::new();
    for &r in scales.iter().rev() {
        let down = gt
            .iter()
            .map(|g| resize(g, r, r, ResizeMethod::Bicubic))
            .collect::<Result<Vec<_>>>()?;
        out.push((r, batch_to_tensor(&down)?));
    }
    Ok(out)
}

/// `Σ_r weight · mean|recon_r − target_r|` over matched scales.
pub fn restoration_loss<T: Float>(
    tape: &mut Tape<T>,
    recons: &[(usize, Var)],
    targets: &[(usize, Tensor<T>)],
    weight: f64,
) -> Result<Var> {
    if recons.len() != targets.len() || recons.is_empty() {
        return Err(invalid!(
            "{} reconstructions for {} targets",
            recons.len(),
            targets.len()
        ));
    }
    let mut total: Option<Var> = None;
    for ((r, v), (tr, t)) in recons.iter().zip(targets) {
        if r != tr {
            return Err(invalid!(
                "scale mismatch: reconstruction at {r}, target at {tr}"
            ));
        }
        let t = tape.constant(t.clone());
        let d = tape.sub(*v, t)?;
        let a = tape.abs(d);
        let m = tape.mean(a);
        let term = tape.scale(m, weight);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}
