//! Parameter groups, Adam and the step-decay schedule.

use std::collections::BTreeSet;

use bfr_autograd::{Gradients, ParamStore, Tensor};

use crate::config::{LearningRates, TrainConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupKind {
    Codec,
    DiscGlobal,
    DiscLocal,
    Generator,
    NoiseBranches,
}

impl GroupKind {
    pub const ALL: [GroupKind; 5] = [
        Self::Codec,
        Self::DiscGlobal,
        Self::DiscLocal,
        Self::Generator,
        Self::NoiseBranches,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Codec => "codec",
            Self::DiscGlobal => "disc_global",
            Self::DiscLocal => "disc_local",
            Self::Generator => "generator",
            Self::NoiseBranches => "noise_branches",
        }
    }

    /// Group owning a parameter, from its namespace.
    pub fn of(param: &str) -> Option<Self> {
        let ns = param.split('/').next()?;
        Some(match ns {
            "codec" => Self::Codec,
            "disc_global" => Self::DiscGlobal,
            "disc_left_eye" | "disc_right_eye" | "disc_mouth" => Self::DiscLocal,
            "generator" => Self::Generator,
            "noise_branches" => Self::NoiseBranches,
            _ => return None,
        })
    }

    pub fn lr(self, lr: &LearningRates) -> f64 {
        match self {
            Self::Codec => lr.codec,
            Self::DiscGlobal => lr.disc_global,
            Self::DiscLocal => lr.disc_local,
            Self::Generator => lr.generator,
            Self::NoiseBranches => lr.noise_branches,
        }
    }

    pub fn is_discriminator(self) -> bool {
        matches!(self, Self::DiscGlobal | Self::DiscLocal)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub kind: GroupKind,
    pub lr: f64,
    pub params: Vec<String>,
}

/// Every parameter is either in exactly one group or explicitly excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSet {
    pub groups: Vec<Group>,
    pub excluded: Vec<String>,
}

impl OptimizerSet {
    /// Assigns parameters to groups by namespace; `exclude` removes
    /// parameters from optimization altogether.
    pub fn build(
        lr: &LearningRates,
        store: &ParamStore<f32>,
        exclude: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        let mut groups: Vec<Group> = GroupKind::ALL
            .iter()
            .map(|&kind| Group {
                kind,
                lr: kind.lr(lr),
                params: Vec::new(),
            })
            .collect();
        let mut excluded = Vec::new();
        for name in store.names() {
            let kind = GroupKind::of(name).ok_or_else(|| {
                Error::Config(format!("parameter {name} belongs to no optimizer group"))
            })?;
            if exclude(name) {
                excluded.push(name.to_string());
            } else {
                groups
                    .iter_mut()
                    .find(|g| g.kind == kind)
                    .expect("all kinds present")
                    .params
                    .push(name.to_string());
            }
        }
        Ok(Self { groups, excluded })
    }

    pub fn group(&self, kind: GroupKind) -> &Group {
        self.groups
            .iter()
            .find(|g| g.kind == kind)
            .expect("all kinds present")
    }

    pub fn trainable(&self, filter: impl Fn(GroupKind) -> bool) -> BTreeSet<String> {
        self.groups
            .iter()
            .filter(|g| filter(g.kind))
            .flat_map(|g| g.params.iter().cloned())
            .collect()
    }

    /// Checks that groups and exclusions partition the store.
    pub fn audit(&self, store: &ParamStore<f32>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for name in self
            .groups
            .iter()
            .flat_map(|g| g.params.iter())
            .chain(&self.excluded)
        {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("parameter {name} assigned twice")));
            }
        }
        let all: BTreeSet<&str> = store.names().collect();
        if all != seen {
            return Err(Error::Config(
                "optimizer groups do not cover the parameter set".into(),
            ));
        }
        Ok(())
    }
}

/// `decay^k` where `k` counts the milestones already passed.
pub fn lr_multiplier(iteration: u64, config: &TrainConfig) -> f64 {
    let frac = iteration as f64 / config.total_iterations as f64;
    let passed = config.milestones.iter().filter(|&&m| frac >= m).count();
    config.decay.powi(passed as i32)
}

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Adam {
    /// Applies one update to every parameter in `group` that has a
    /// gradient. `step` is the 1-based update count.
    pub fn update(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &Gradients<f32>,
        group: &Group,
        lr: f64,
        config: &TrainConfig,
        step: u64,
    ) -> Result<()> {
        let [b1, b2] = config.betas;
        let c1 = 1.0 - b1.powf(step as f64);
        let c2 = 1.0 - b2.powf(step as f64);
        for name in &group.params {
            let Some(g) = grads.param(name) else { continue };
            if !self.m.contains(name) {
                self.m
                    .insert(name.clone(), Tensor::zeros(g.shape().to_vec()))?;
                self.v
                    .insert(name.clone(), Tensor::zeros(g.shape().to_vec()))?;
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            let p = store.get_mut(name)?.data_mut();
            for (((pi, mi), vi), &gi) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                *pi = (*pi as f64 - lr * (mn / c1) / ((vn / c2).sqrt() + config.eps)) as f32;
            }
        }
        Ok(())
    }
}
