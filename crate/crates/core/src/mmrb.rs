//! Mixed multi-path residual block and the plain residual block used in its
//! place when the block is ablated.
//!
//! With input `F = [X1, X2]` split along channels:
//!
//! ```text
//! P1  = σ(W1a * X1)          P2  = σ(W2a * X2)
//! P1' = σ(W1b * [P1, P2])    P2' = σ(W2b * [P1, P2])
//! P   = σ(W3 * [P1', P2'])   out = F + P
//! ```
//!
//! `W1*` are 3×3, `W2*` are 5×5 and `W3` is 1×1; all convolutions are
//! bias-free with zero same-padding and every σ is a PReLU with its own
//! learnable slope.

use bfr_autograd::{Float, ParamStore, Tape, Var};

use crate::error::{invalid, Result};
use crate::image::FeatureMap;
use crate::nn::{self, init_const, init_conv, prelu};
use crate::seed::Rng;

pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Mmrb {
    pub prefix: String,
    pub channels: usize,
    /// Reuse the first-stage 3×3/5×5 kernels for the cross-branch stage,
    /// applied to each half of `[P1, P2]` and summed.
    pub shared_weights: bool,
}

impl Mmrb {
    pub fn new(prefix: impl Into<String>, channels: usize, shared_weights: bool) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(invalid!(
                "MMRB needs a positive even channel count, got {channels}"
            ));
        }
        Ok(Self {
            prefix: prefix.into(),
            channels,
            shared_weights,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}/{part}", self.prefix)
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        let (c, h) = (self.channels, self.channels / 2);
        init_conv(store, &self.name("b1a"), (h, h, 3), PRELU_INIT, rng)?;
        init_conv(store, &self.name("b2a"), (h, h, 5), PRELU_INIT, rng)?;
        if !self.shared_weights {
            init_conv(store, &self.name("b1b"), (h, c, 3), PRELU_INIT, rng)?;
            init_conv(store, &self.name("b2b"), (h, c, 5), PRELU_INIT, rng)?;
        }
        init_conv(store, &self.name("fuse"), (c, c, 1), PRELU_INIT, rng)?;
        for i in 1..=5 {
            init_const(store, &self.name(&format!("act{i}")), &[1], PRELU_INIT)?;
        }
        Ok(())
    }

    /// Second-stage branch: separate `C → C/2` weights, or the first-stage
    /// kernel applied to both halves of the concatenation.
    fn cross<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        p: (Var, Var),
        cat: Var,
        own: &str,
        first: &str,
    ) -> Result<Var> {
        if self.shared_weights {
            let a = nn::conv(tape, store, p.0, &self.name(first), 1)?;
            let b = nn::conv(tape, store, p.1, &self.name(first), 1)?;
            Ok(tape.add(a, b)?)
        } else {
            nn::conv(tape, store, cat, &self.name(own), 1)
        }
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: Var,
    ) -> Result<Var> {
        let c = tape.shape(f).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(invalid!(
                "{} expects {} channels, got {c}",
                self.prefix,
                self.channels
            ));
        }
        let h = c / 2;
        let x1 = tape.narrow1(f, 0, h)?;
        let x2 = tape.narrow1(f, h, h)?;
        let p1 = nn::conv(tape, store, x1, &self.name("b1a"), 1)?;
        let p1 = prelu(tape, store, p1, &self.name("act1"))?;
        let p2 = nn::conv(tape, store, x2, &self.name("b2a"), 1)?;
        let p2 = prelu(tape, store, p2, &self.name("act2"))?;
        let cat = tape.concat1(p1, p2)?;
        let q1 = self.cross(tape, store, (p1, p2), cat, "b1b", "b1a")?;
        let q1 = prelu(tape, store, q1, &self.name("act3"))?;
        let q2 = self.cross(tape, store, (p1, p2), cat, "b2b", "b2a")?;
        let q2 = prelu(tape, store, q2, &self.name("act4"))?;
        let cat2 = tape.concat1(q1, q2)?;
        let p = nn::conv(tape, store, cat2, &self.name("fuse"), 1)?;
        let p = prelu(tape, store, p, &self.name("act5"))?;
        Ok(tape.add(f, p)?)
    }

    /// Evaluates the block on a single feature map.
    pub fn apply<T: Float>(
        &self,
        store: &ParamStore<T>,
        f: &FeatureMap<T>,
    ) -> Result<FeatureMap<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(f.to_tensor());
        let y = self.forward(&mut tape, store, x)?;
        FeatureMap::from_tensor(tape.value(y))
    }

    /// Scalar parameter count of the block at `channels` channels.
    pub fn param_count(channels: usize, shared_weights: bool) -> usize {
        let (c, h) = (channels, channels / 2);
        let first = h * h * 9 + h * h * 25;
        let second = if shared_weights {
            0
        } else {
            h * c * 9 + h * c * 25
        };
        first + second + c * c + 5
    }
}

/// `x + conv3(σ(conv3(x)))`, the ablation stand-in for an MMRB.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub prefix: String,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        let c = self.channels;
        init_conv(
            store,
            &format!("{}/conv1", self.prefix),
            (c, c, 3),
            PRELU_INIT,
            rng,
        )?;
        init_conv(
            store,
            &format!("{}/conv2", self.prefix),
            (c, c, 3),
            1.0,
            rng,
        )?;
        init_const(store, &format!("{}/act1", self.prefix), &[1], PRELU_INIT)
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let y = nn::conv(tape, store, x, &format!("{}/conv1", self.prefix), 1)?;
        let y = prelu(tape, store, y, &format!("{}/act1", self.prefix))?;
        let y = nn::conv(tape, store, y, &format!("{}/conv2", self.prefix), 1)?;
        Ok(tape.add(x, y)?)
    }
}

/// Feature block selected by the `use_mmrb` switch.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureBlock {
    Mmrb(Mmrb),
    Residual(ResidualBlock),
}

impl FeatureBlock {
    pub fn new(
        prefix: String,
        channels: usize,
        use_mmrb: bool,
        shared_weights: bool,
    ) -> Result<Self> {
        Ok(if use_mmrb {
            Self::Mmrb(Mmrb::new(prefix, channels, shared_weights)?)
        } else {
            Self::Residual(ResidualBlock { prefix, channels })
        })
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        match self {
            Self::Mmrb(b) => b.init(store, rng),
            Self::Residual(b) => b.init(store, rng),
        }
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        match self {
            Self::Mmrb(b) => b.forward(tape, store, x),
            Self::Residual(b) => b.forward(tape, store, x),
        }
    }
}
