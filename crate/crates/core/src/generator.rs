//! Style-based generator: mapping MLP, learned constant, modulated style
//! blocks with concatenation-based feature fusion and a skip RGB head.
//!
//! Parameters live under `generator/` except the fusion layers, which form
//! the separately optimized `noise_branches/` group.

use bfr_autograd::{Float, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::error::{invalid, Error, Result};
use crate::nn::{self, init_const, init_conv, init_linear, ladder, prelu};
use crate::seed::Rng;

pub const DEMOD_EPS: f64 = 1e-8;
const MAPPING_SLOPE: f64 = 0.2;
const ACT_INIT: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub mapping_layers: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { mapping_layers: 4 }
    }
}

impl GeneratorConfig {
    pub fn paper() -> Self {
        Self { mapping_layers: 8 }
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub codec: CodecConfig,
    pub config: GeneratorConfig,
}

/// `w'_{ojk} = s_j · w_{ojk}`, then each output filter divided by
/// `sqrt(Σ w'² + ε)`. `weights` is `[O, C, k, k]`, `style` has `C` entries.
pub fn modulate_demodulate<T: Float>(
    weights: &Tensor<T>,
    style: &[T],
    demodulate: bool,
) -> Result<Tensor<T>> {
    if style.is_empty() {
        return Err(invalid!("style vector is empty"));
    }
    let mut tape = Tape::inference();
    let w = tape.constant(weights.clone());
    let s = tape.constant(Tensor::new(vec![1, style.len()], style.to_vec())?);
    let m = tape.modulate(w, s, demodulate.then_some(DEMOD_EPS))?;
    Ok(tape.value(m).clone().reshape(weights.shape().to_vec())?)
}

impl Generator {
    pub fn new(codec: CodecConfig, config: GeneratorConfig) -> Result<Self> {
        codec.validate()?;
        if config.mapping_layers == 0 {
            return Err(Error::Config("mapping_layers must be positive".into()));
        }
        Ok(Self { codec, config })
    }

    /// Block resolutions `4, 8, …, base`.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut r = ladder(self.codec.base_resolution, 4);
        r.reverse();
        r
    }

    fn has_fusion(&self, res: usize) -> bool {
        res >= self.codec.noise_min_resolution
    }

    pub fn fusion_in_channels(&self, res: usize) -> usize {
        2 * self.codec.channels_at(res)
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        let d = self.codec.latent_dim;
        for i in 0..self.config.mapping_layers {
            let std = if i == 0 {
                1.0
            } else {
                (2.0 / (1.0 + MAPPING_SLOPE * MAPPING_SLOPE) / d as f64).sqrt()
            };
            init_linear(store, &format!("generator/mapping.{i}"), d, d, std, rng)?;
            init_const(store, &format!("generator/mapping.{i}.bias"), &[d], 0.0)?;
        }
        let c4 = self.codec.channels_at(4);
        store.insert("generator/const", nn::normal(&[1, c4, 4, 4], 1.0, rng))?;
        let mut prev = c4;
        for r in self.resolutions() {
            let c = self.codec.channels_at(r);
            let b = format!("generator/b{r}");
            self.init_style(store, &format!("{b}.conv"), prev, rng)?;
            init_conv(store, &format!("{b}.conv"), (c, prev, 3), ACT_INIT, rng)?;
            init_const(store, &format!("{b}.conv.bias"), &[c], 0.0)?;
            init_const(store, &format!("{b}.act"), &[1], ACT_INIT)?;
            self.init_style(store, &format!("{b}.to_rgb"), c, rng)?;
            init_conv(store, &format!("{b}.to_rgb"), (3, c, 1), 0.0, rng)?;
            store
                .get_mut(&format!("{b}.to_rgb.weight"))?
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= T::of(0.1));
            init_const(store, &format!("{b}.to_rgb.bias"), &[3], 0.0)?;
            if self.has_fusion(r) {
                let f = format!("noise_branches/b{r}");
                init_conv(
                    store,
                    &format!("{f}.fuse"),
                    (c, self.fusion_in_channels(r), 1),
                    ACT_INIT,
                    rng,
                )?;
                init_const(store, &format!("{f}.fuse.bias"), &[c], 0.0)?;
                init_const(store, &format!("{f}.act"), &[1], ACT_INIT)?;
            }
            prev = c;
        }
        Ok(())
    }

    fn init_style<T: Float>(
        &self,
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let d = self.codec.latent_dim;
        init_linear(
            store,
            &format!("{name}.style"),
            width,
            d,
            1.0 / (d as f64).sqrt(),
            rng,
        )?;
        init_const(store, &format!("{name}.style.bias"), &[width], 1.0)
    }

    /// `W = MLP(z / |z|)` applied to every latent vector in `z`.
    pub fn map_latent<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
    ) -> Result<Vec<Var>> {
        let d = self.codec.latent_dim;
        let count = self.codec.latent_count();
        let shape = tape.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != d * count {
            return Err(invalid!("latent must be [N, {}], got {shape:?}", d * count));
        }
        let mut ws = Vec::with_capacity(count);
        for k in 0..count {
            let mut h = tape.narrow1(z, k * d, d)?;
            h = tape.l2_normalize(h, 1e-8)?;
            for i in 0..self.config.mapping_layers {
                h = nn::linear(tape, store, h, &format!("generator/mapping.{i}"))?;
                h = tape.leaky_relu(h, MAPPING_SLOPE);
            }
            ws.push(h);
        }
        Ok(ws)
    }

    fn modconv<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        w: Var,
        name: &str,
        demod: bool,
    ) -> Result<Var> {
        let style = nn::linear(tape, store, w, &format!("{name}.style"))?;
        let weight = tape.param(store, &format!("{name}.weight"))?;
        let k = tape.shape(weight)[3];
        let modulated = tape.modulate(weight, style, demod.then_some(DEMOD_EPS))?;
        let y = tape.conv2d(x, modulated, 1, k / 2)?;
        let b = tape.param(store, &format!("{name}.bias"))?;
        Ok(tape.channel_bias(y, b)?)
    }

    /// Synthesizes `[N, 3, base, base]` images in nominal `[0, 1]` from
    /// mapped latents and decoder features (coarse to fine).
    pub fn synthesize<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ws: &[Var],
        features: &[(usize, Var)],
    ) -> Result<Var> {
        let resolutions = self.resolutions();
        if ws.len() != self.codec.latent_count() || ws.is_empty() {
            return Err(invalid!(
                "expected {} latent vectors, got {}",
                self.codec.latent_count(),
                ws.len()
            ));
        }
        let n = tape.shape(ws[0])[0];
        let c = tape.param(store, "generator/const")?;
        let mut y = tape.tile0(c, n)?;
        let mut rgb: Option<Var> = None;
        for (t, &r) in resolutions.iter().enumerate() {
            let w = ws[t.min(ws.len() - 1)];
            let b = format!("generator/b{r}");
            if t > 0 {
                y = tape.upsample2x(y)?;
            }
            y = self.modconv(tape, store, y, w, &format!("{b}.conv"), true)?;
            y = prelu(tape, store, y, &format!("{b}.act"))?;
            if self.has_fusion(r) {
                let Some(&(_, noise)) = features.iter().find(|(fr, _)| *fr == r) else {
                    return Err(invalid!("missing noise features at {r}x{r}"));
                };
                let (ns, ys) = (tape.shape(noise).to_vec(), tape.shape(y).to_vec());
                if ns.len() != 4
                    || ns[0] != ys[0]
                    || ns[2..] != ys[2..]
                    || ns[1] + ys[1] != self.fusion_in_channels(r)
                {
                    return Err(invalid!(
                        "noise features {ns:?} do not fit block output {ys:?}"
                    ));
                }
                let cat = tape.concat1(noise, y)?;
                let f = format!("noise_branches/b{r}");
                y = nn::conv(tape, store, cat, &format!("{f}.fuse"), 1)?;
                y = prelu(tape, store, y, &format!("{f}.act"))?;
            }
            let out = self.modconv(tape, store, y, w, &format!("{b}.to_rgb"), false)?;
            rgb = Some(match rgb {
                None => out,
                Some(prev) => {
                    let up = tape.upsample2x(prev)?;
                    tape.add(up, out)?
                }
            });
        }
        let rgb = rgb.expect("at least one block");
        let half = tape.scale(rgb, 0.5);
        Ok(tape.offset(half, 0.5))
    }
}
