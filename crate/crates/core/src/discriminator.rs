//! Strided-convolution discriminators and layer freezing.

use bfr_autograd::{Float, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::codec::ChannelSchedule;
use crate::error::{invalid, Error, Result};
use crate::nn::{self, init_const, init_conv, init_linear, is_pow2, ladder};
use crate::seed::Rng;

const SLOPE: f64 = 0.2;

/// `from_rgb` 1×1 conv, one stride-2 3×3 conv per halving down to 4×4,
/// then a dense head producing one logit per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub prefix: String,
    pub resolution: usize,
    pub channels: ChannelSchedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    LeftEye,
    RightEye,
    Mouth,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::LeftEye, Region::RightEye, Region::Mouth];

    pub fn name(self) -> &'static str {
        match self {
            Region::LeftEye => "left_eye",
            Region::RightEye => "right_eye",
            Region::Mouth => "mouth",
        }
    }

    pub fn namespace(self) -> String {
        format!("disc_{}", self.name())
    }
}

pub const GLOBAL_NAMESPACE: &str = "disc_global";

impl Discriminator {
    pub fn new(
        prefix: impl Into<String>,
        resolution: usize,
        channels: ChannelSchedule,
    ) -> Result<Self> {
        if !is_pow2(resolution) || resolution < 4 {
            return Err(Error::Config(format!(
                "discriminator resolution must be a power of two >= 4, got {resolution}"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            resolution,
            channels,
        })
    }

    /// Number of convolution layers, input side first.
    pub fn conv_layers(&self) -> usize {
        ladder(self.resolution, 4).len()
    }

    /// Parameter-name prefix of conv layer `i` (0 is the input layer).
    pub fn layer_name(&self, i: usize) -> String {
        format!("{}/conv{i}", self.prefix)
    }

    fn ch(&self, res: usize) -> usize {
        self.channels.at(self.resolution, res)
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        let res = ladder(self.resolution, 4);
        init_conv(
            store,
            &self.layer_name(0),
            (self.ch(self.resolution), 3, 1),
            SLOPE,
            rng,
        )?;
        init_const(
            store,
            &format!("{}.bias", self.layer_name(0)),
            &[self.ch(self.resolution)],
            0.0,
        )?;
        for (i, pair) in res.windows(2).enumerate() {
            let (a, b) = (self.ch(pair[0]), self.ch(pair[1]));
            let name = self.layer_name(i + 1);
            init_conv(store, &name, (b, a, 3), SLOPE, rng)?;
            init_const(store, &format!("{name}.bias"), &[b], 0.0)?;
        }
        let flat = self.ch(4) * 16;
        init_linear(
            store,
            &format!("{}/head", self.prefix),
            1,
            flat,
            1.0 / (flat as f64).sqrt(),
            rng,
        )?;
        init_const(store, &format!("{}/head.bias", self.prefix), &[1], 0.0)
    }

    /// Logits `[N, 1]`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let r = self.resolution;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != r || shape[3] != r {
            return Err(invalid!(
                "{} expects [N, 3, {r}, {r}], got {shape:?}",
                self.prefix
            ));
        }
        let mut h = x;
        for i in 0..self.conv_layers() {
            h = nn::conv(
                tape,
                store,
                h,
                &self.layer_name(i),
                if i == 0 { 1 } else { 2 },
            )?;
            h = tape.leaky_relu(h, SLOPE);
        }
        let n = shape[0];
        let flat_len = tape.value(h).numel() / n;
        let flat = tape.reshape(h, &[n, flat_len])?;
        nn::linear(tape, store, flat, &format!("{}/head", self.prefix))
    }

    /// Local-discriminator probabilities `sigmoid(logit)`.
    pub fn probability<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let logit = self.forward(tape, store, x)?;
        Ok(tape.sigmoid(logit))
    }
}

/// Parameters excluded from optimization by layer freezing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub frozen_layer_count: usize,
    pub names: Vec<String>,
}

/// Freezes the `n_frozen` input-side conv layers of `disc`. The returned
/// name list holds one entry per frozen layer; each covers the layer's
/// weight and bias.
pub fn apply_freeze(disc: &Discriminator, n_frozen: usize) -> Result<FreezePlan> {
    if n_frozen > disc.conv_layers() {
        return Err(Error::Config(format!(
            "cannot freeze {n_frozen} of {} conv layers",
            disc.conv_layers()
        )));
    }
    Ok(FreezePlan {
        frozen_layer_count: n_frozen,
        names: (0..n_frozen).map(|i| disc.layer_name(i)).collect(),
    })
}

impl FreezePlan {
    /// Whether a parameter belongs to a frozen layer.
    pub fn freezes(&self, param: &str) -> bool {
        self.names.iter().any(|l| {
            param
                .strip_prefix(l.as_str())
                .is_some_and(|rest| rest.starts_with('.'))
        })
    }
}

/// Frozen layer count: five at full depth, shrunk to leave at least two
/// trainable conv layers on shallow networks.
pub fn default_frozen_layers(disc: &Discriminator) -> usize {
    5.min(disc.conv_layers().saturating_sub(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_depth() {
        let ch = ChannelSchedule { base: 4, max: 8 };
        assert_eq!(Discriminator::new("d", 512, ch).unwrap().conv_layers(), 8);
        assert_eq!(Discriminator::new("d", 64, ch).unwrap().conv_layers(), 5);
        assert!(Discriminator::new("d", 48, ch).is_err());
    }

    #[test]
    fn freeze_names_are_input_side() {
        let d =
            Discriminator::new("disc_global", 512, ChannelSchedule { base: 4, max: 8 }).unwrap();
        let plan = apply_freeze(&d, default_frozen_layers(&d)).unwrap();
        assert_eq!(
            plan.names,
            (0..5)
                .map(|i| format!("disc_global/conv{i}"))
                .collect::<Vec<_>>()
        );
        assert!(plan.freezes("disc_global/conv4.weight"));
        assert!(!plan.freezes("disc_global/conv5.weight"));
        assert!(apply_freeze(&d, 9).is_err());
        assert!(apply_freeze(&d, 0).unwrap().names.is_empty());
    }
}
