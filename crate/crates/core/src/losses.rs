//! Adversarial, content, identity and discriminator objectives, both as
//! graph builders for training and as scalar functions.

use std::collections::BTreeMap;

use bfr_autograd::{Float, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::discriminator::Region;
use crate::error::{invalid, Error, Result};
use crate::extractor::FeatureExtractor;

/// Upper clamp on local-discriminator probabilities seen by the generator.
pub const PROB_CLAMP: f64 = 1.0 - 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_l: f64,
    pub lambda_l1: f64,
    pub lambda_fm: f64,
    pub lambda_fp: f64,
    pub lambda_rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_g: 0.5,
            lambda_l: 3.0,
            lambda_l1: 8.0,
            lambda_fm: 0.02,
            lambda_fp: 10.0,
            lambda_rec: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_g,
            self.lambda_l,
            self.lambda_l1,
            self.lambda_fm,
            self.lambda_fp,
            self.lambda_rec,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Non-saturating generator term `softplus(−logit)`.
pub fn adv_g_loss(fake_logit: f64) -> f64 {
    softplus(-fake_logit)
}

fn check_prob(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid!("probability {p} outside (0, 1)"));
    }
    Ok(())
}

/// `Σ_region log(1 − D_region)` with `D` clamped at `1 − 1e-6`.
pub fn adv_local_loss(probs: &BTreeMap<Region, f64>) -> Result<f64> {
    let mut total = 0.0;
    for r in Region::ALL {
        let p = *probs
            .get(&r)
            .ok_or_else(|| invalid!("missing probability for {}", r.name()))?;
        check_prob(p)?;
        total += (1.0 - p.min(PROB_CLAMP)).ln();
    }
    Ok(total)
}

pub fn adv_combined(g_term: f64, l_term: f64, w: &LossWeights) -> f64 {
    w.lambda_g * g_term + w.lambda_l * l_term
}

/// Logistic loss `softplus(−real) + softplus(fake)`.
pub fn discriminator_loss(real_logit: f64, fake_logit: f64) -> f64 {
    softplus(-real_logit) + softplus(fake_logit)
}

/// `−log(real) − log(1 − fake)`.
pub fn local_discriminator_loss(real_prob: f64, fake_prob: f64) -> Result<f64> {
    check_prob(real_prob)?;
    check_prob(fake_prob)?;
    Ok(-real_prob.ln() - (1.0 - fake_prob).ln())
}

/// Per-term values of one generator/discriminator update. `adv_g` and
/// `adv_l` are unweighted; the content, identity and restoration terms
/// already carry their weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_l: f64,
    pub l1: f64,
    pub fm: f64,
    pub fp: f64,
    pub rec: f64,
    pub total: f64,
    pub d_global: f64,
    pub d_local: f64,
}

/// Generator-side components before combination.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub adv_g: f64,
    pub adv_l: f64,
    pub l1: f64,
    pub fm: f64,
    pub fp: f64,
    pub rec: f64,
}

impl Components {
    pub fn total(&self, w: &LossWeights) -> f64 {
        adv_combined(self.adv_g, self.adv_l, w) + self.l1 + self.fm + self.fp + self.rec
    }
}

pub fn total_loss(c: Components, w: &LossWeights, d_global: f64, d_local: f64) -> LossReport {
    LossReport {
        adv_g: c.adv_g,
        adv_l: c.adv_l,
        l1: c.l1,
        fm: c.fm,
        fp: c.fp,
        rec: c.rec,
        total: c.total(w),
        d_global,
        d_local,
    }
}

impl LossReport {
    pub fn components(&self) -> Components {
        Components {
            adv_g: self.adv_g,
            adv_l: self.adv_l,
            l1: self.l1,
            fm: self.fm,
            fp: self.fp,
            rec: self.rec,
        }
    }

    /// Distance between `total` and the weighted sum of its components.
    pub fn combination_error(&self, w: &LossWeights) -> f64 {
        (self.total - self.components().total(w)).abs()
    }

    pub fn is_finite(&self) -> bool {
        [
            self.adv_g,
            self.adv_l,
            self.l1,
            self.fm,
            self.fp,
            self.rec,
            self.total,
            self.d_global,
            self.d_local,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn add_opt<T: Float>(tape: &mut Tape<T>, acc: Option<Var>, v: Var) -> Result<Var> {
    Ok(match acc {
        None => v,
        Some(a) => tape.add(a, v)?,
    })
}

/// Batch mean of `softplus(−logits)`.
pub fn adv_g_graph<T: Float>(tape: &mut Tape<T>, fake_logits: Var) -> Var {
    let neg = tape.scale(fake_logits, -1.0);
    let sp = tape.softplus(neg);
    tape.mean(sp)
}

/// `Σ_region mean log(1 − σ(logit))`, written as `−softplus(logit)` with the
/// logit clamped so the probability never exceeds `1 − 1e-6`.
pub fn adv_local_graph<T: Float>(tape: &mut Tape<T>, fake_logits: &[Var]) -> Result<Var> {
    if fake_logits.len() != Region::ALL.len() {
        return Err(invalid!(
            "expected {} region logits, got {}",
            Region::ALL.len(),
            fake_logits.len()
        ));
    }
    let cap = (PROB_CLAMP / (1.0 - PROB_CLAMP)).ln();
    let mut acc = None;
    for &l in fake_logits {
        let c = tape.clamp(l, f64::NEG_INFINITY, cap);
        let sp = tape.softplus(c);
        let m = tape.mean(sp);
        let term = tape.scale(m, -1.0);
        acc = Some(add_opt(tape, acc, term)?);
    }
    Ok(acc.expect("three regions"))
}

/// Batch mean of `softplus(−real) + softplus(fake)`.
pub fn d_loss_graph<T: Float>(
    tape: &mut Tape<T>,
    real_logits: Var,
    fake_logits: Var,
) -> Result<Var> {
    let neg = tape.scale(real_logits, -1.0);
    let a = tape.softplus(neg);
    let a = tape.mean(a);
    let b = tape.softplus(fake_logits);
    let b = tape.mean(b);
    Ok(tape.add(a, b)?)
}

/// Weighted pixel L1 and feature-matching terms. Each feature layer
/// contributes the per-image RMS of its difference, averaged over the batch.
pub fn content_graph<T: Float>(
    tape: &mut Tape<T>,
    gt: Var,
    fake: Var,
    extractor: &dyn FeatureExtractor<T>,
    w: &LossWeights,
) -> Result<(Var, Var)> {
    if tape.shape(gt) != tape.shape(fake) {
        return Err(invalid!(
            "content loss shape mismatch {:?} vs {:?}",
            tape.shape(gt),
            tape.shape(fake)
        ));
    }
    let d = tape.sub(gt, fake)?;
    let a = tape.abs(d);
    let m = tape.mean(a);
    let l1 = tape.scale(m, w.lambda_l1);
    let fg = extractor.features(tape, gt)?;
    let ff = extractor.features(tape, fake)?;
    if fg.is_empty() || fg.len() != ff.len() {
        return Err(invalid!(
            "extractor {} returned no features",
            extractor.name()
        ));
    }
    let mut acc = None;
    for (a, b) in fg.into_iter().zip(ff) {
        let d = tape.sub(a, b)?;
        let sq = tape.sqr(d);
        let per = tape.mean_per_sample(sq);
        let rms = tape.sqrt(per);
        let term = tape.mean(rms);
        acc = Some(add_opt(tape, acc, term)?);
    }
    let fm = tape.scale(acc.expect("non-empty"), w.lambda_fm);
    Ok((l1, fm))
}

/// `λ_FP · mean|φ(gt) − φ(fake)|`.
pub fn identity_graph<T: Float>(
    tape: &mut Tape<T>,
    gt: Var,
    fake: Var,
    extractor: &dyn FeatureExtractor<T>,
    w: &LossWeights,
) -> Result<Var> {
    let a = extractor.embed(tape, gt)?;
    let b = extractor.embed(tape, fake)?;
    if tape.shape(a) != tape.shape(b) {
        return Err(invalid!(
            "embedding shape mismatch {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    let d = tape.sub(a, b)?;
    let abs = tape.abs(d);
    let m = tape.mean(abs);
    Ok(tape.scale(m, w.lambda_fp))
}
