//! Joint adversarial training of the codec and generator.

mod data;
mod optim;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bfr_autograd::{ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use data::{Batch, Dataset, Sample};
pub use optim::{lr_multiplier, Adam, Group, GroupKind, OptimizerSet};

use crate::codec::{recon_targets, restoration_loss};
use crate::config::RunConfig;
use crate::container;
use crate::discriminator::{apply_freeze, default_frozen_layers, FreezePlan};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::losses::{
    adv_g_graph, adv_local_graph, content_graph, d_loss_graph, identity_graph, total_loss,
    Components, LossReport,
};
use crate::model::{Critics, Restorer};
use crate::roi::crop_batch;

/// Everything a checkpoint restores.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub adam: Adam,
    /// Completed iterations.
    pub iteration: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: u64,
    config_hash: String,
    /// The batch stream is a pure function of the seed and the iteration.
    rng: RngState,
    config: RunConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    iteration: u64,
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

pub struct Trainer {
    pub config: RunConfig,
    pub restorer: Restorer,
    pub critics: Critics,
    pub freeze: FreezePlan,
    pub optim: OptimizerSet,
    pub state: TrainState,
    content: Box<dyn FeatureExtractor<f32>>,
    identity: Box<dyn FeatureExtractor<f32>>,
}

impl Trainer {
    /// Fresh parameters from the seed, then any configured pretrained
    /// containers.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let restorer = Restorer::new(config.codec_config(), config.generator.clone())?;
        let critics = Critics::new(
            restorer.resolution(),
            config.discriminator.roi.roi_size,
            config.discriminator.channels,
        )?;
        let mut params = ParamStore::new();
        restorer.init(&mut params, config.seed)?;
        critics.init(&mut params, config.seed)?;
        for path in &config.paths.pretrained {
            import_pretrained(&mut params, path)?;
        }
        let state = TrainState {
            params,
            adam: Adam::default(),
            iteration: 0,
        };
        Self::assemble(config, restorer, critics, state)
    }

    fn assemble(
        config: RunConfig,
        restorer: Restorer,
        critics: Critics,
        state: TrainState,
    ) -> Result<Self> {
        let n_frozen = if config.ablation.freeze_d {
            config
                .discriminator
                .n_frozen
                .unwrap_or_else(|| default_frozen_layers(&critics.global))
        } else {
            0
        };
        let freeze = apply_freeze(&critics.global, n_frozen)?;
        let ab = config.ablation.clone();
        let optim = OptimizerSet::build(&config.train.lr, &state.params, |name| {
            let kind = GroupKind::of(name);
            freeze.freezes(name)
                || (!ab.finetune_prior && kind == Some(GroupKind::Generator))
                || (!ab.use_local_d && kind == Some(GroupKind::DiscLocal))
        })?;
        optim.audit(&state.params)?;
        let content = config.extractors.content.build()?;
        let identity = config.extractors.identity.build()?;
        Ok(Self {
            config,
            restorer,
            critics,
            freeze,
            optim,
            state,
            content,
            identity,
        })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.state.params
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    fn tape_for(&self, filter: impl Fn(GroupKind) -> bool) -> Tape<f32> {
        let names: BTreeSet<String> = self.optim.trainable(filter);
        Tape::with_trainable(move |n| names.contains(n))
    }

    fn local_logits(&self, tape: &mut Tape<f32>, x: Var, batch: &Batch) -> Result<Vec<Var>> {
        let size = self.config.discriminator.roi.roi_size;
        let mut out = Vec::new();
        for ((region, disc), (r2, boxes)) in self.critics.local.iter().zip(&batch.boxes) {
            debug_assert_eq!(region, r2);
            let crops = crop_batch(tape, x, boxes, size)?;
            out.push(disc.forward(tape, &self.state.params, crops)?);
        }
        Ok(out)
    }

    /// One discriminator update on real vs detached fake images followed by
    /// one codec/generator update against the updated discriminators.
    pub fn step(&mut self, data: &Dataset) -> Result<LossReport> {
        let it = self.state.iteration;
        let cfg = &self.config;
        let indices = data.batch_indices(cfg.seed, it, cfg.train.batch_size);
        let batch = data.batch(&indices, &cfg.discriminator.roi)?;
        let mult = lr_multiplier(it, &cfg.train);
        let use_local = cfg.ablation.use_local_d;

        let mut g_tape = self.tape_for(|k| !k.is_discriminator());
        let lq = g_tape.constant(batch.lq.clone());
        let restored = self.restorer.forward(&mut g_tape, &self.state.params, lq)?;
        let fake_value = g_tape.value(restored.image).clone();

        let mut d_tape = self.tape_for(|k| k.is_discriminator());
        let real = d_tape.constant(batch.hq.clone());
        let fake = d_tape.constant(fake_value);
        let real_logit = self
            .critics
            .global
            .forward(&mut d_tape, &self.state.params, real)?;
        let fake_logit = self
            .critics
            .global
            .forward(&mut d_tape, &self.state.params, fake)?;
        let d_global = d_loss_graph(&mut d_tape, real_logit, fake_logit)?;
        let mut d_total = d_global;
        let mut d_local_value = 0.0;
        if use_local {
            let rl = self.local_logits(&mut d_tape, real, &batch)?;
            let fl = self.local_logits(&mut d_tape, fake, &batch)?;
            let mut acc: Option<Var> = None;
            for (r, f) in rl.into_iter().zip(fl) {
                let l = d_loss_graph(&mut d_tape, r, f)?;
                acc = Some(match acc {
                    None => l,
                    Some(a) => d_tape.add(a, l)?,
                });
            }
            let local = acc.expect("three regions");
            d_local_value = d_tape.scalar(local) as f64;
            d_total = d_tape.add(d_total, local)?;
        }
        let d_global_value = d_tape.scalar(d_global) as f64;
        let d_grads = d_tape.backward(d_total)?;
        drop(d_tape);
        for kind in [GroupKind::DiscGlobal, GroupKind::DiscLocal] {
            let group = self.optim.group(kind).clone();
            self.state.adam.update(
                &mut self.state.params,
                &d_grads,
                &group,
                group.lr * mult,
                &self.config.train,
                it + 1,
            )?;
        }

        let cfg = &self.config;
        let w = &cfg.loss;
        let tape = &mut g_tape;
        let gt = tape.constant(batch.hq.clone());
        let fake = restored.image;
        let logits = self
            .critics
            .global
            .forward(tape, &self.state.params, fake)?;
        let adv_g = adv_g_graph(tape, logits);
        let adv_l = if use_local {
            let l = self.local_logits(tape, fake, &batch)?;
            Some(adv_local_graph(tape, &l)?)
        } else {
            None
        };
        let (l1, fm) = content_graph(tape, gt, fake, self.content.as_ref(), w)?;
        let fp = identity_graph(tape, gt, fake, self.identity.as_ref(), w)?;
        let targets = recon_targets::<f32>(&batch.hq_images, &self.restorer.codec.config.scales())?;
        let rec = restoration_loss(tape, &restored.recons, &targets, w.lambda_rec)?;
        let mut total = tape.scale(adv_g, w.lambda_g);
        if let Some(l) = adv_l {
            let s = tape.scale(l, w.lambda_l);
            total = tape.add(total, s)?;
        }
        for term in [l1, fm, fp, rec] {
            total = tape.add(total, term)?;
        }
        let val = |v: Var| tape.scalar(v) as f64;
        let components = Components {
            adv_g: val(adv_g),
            adv_l: adv_l.map(val).unwrap_or(0.0),
            l1: val(l1),
            fm: val(fm),
            fp: val(fp),
            rec: val(rec),
        };
        let report = total_loss(components, w, d_global_value, d_local_value);
        let graph_total = val(total);
        if !report.is_finite() || !graph_total.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                report: serde_json::to_string(&report)?,
            });
        }
        debug_assert!((graph_total - report.total).abs() <= 1e-3 * report.total.abs().max(1.0));
        let g_grads = tape.backward(total)?;
        for kind in [
            GroupKind::Codec,
            GroupKind::Generator,
            GroupKind::NoiseBranches,
        ] {
            let group = self.optim.group(kind).clone();
            self.state.adam.update(
                &mut self.state.params,
                &g_grads,
                &group,
                group.lr * mult,
                &self.config.train,
                it + 1,
            )?;
        }
        self.state.iteration += 1;
        Ok(report)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut all = self.state.params.clone();
        for (name, t) in self.state.adam.m.iter() {
            all.insert(format!("{M_PREFIX}{name}"), t.clone())?;
        }
        for (name, t) in self.state.adam.v.iter() {
            all.insert(format!("{V_PREFIX}{name}"), t.clone())?;
        }
        let meta = CheckpointMeta {
            iteration: self.state.iteration,
            config_hash: self.config.hash(),
            rng: RngState {
                seed: self.config.seed,
                iteration: self.state.iteration,
            },
            config: self.config.clone(),
        };
        container::encode(&all, &serde_json::to_value(meta)?)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Resumes from a checkpoint. Unless `allow_config_change`, the stored
    /// config must hash equal to `config`.
    pub fn resume(config: RunConfig, path: &Path, allow_config_change: bool) -> Result<Self> {
        config.validate()?;
        let (store, meta) = container::read(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        if meta.config_hash != config.hash() {
            if !allow_config_change {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration (hash {}); pass the override flag to resume anyway",
                    path.display(),
                    meta.config_hash
                )));
            }
            log::warn!("resuming {} under a changed configuration", path.display());
        }
        let restorer = Restorer::new(config.codec_config(), config.generator.clone())?;
        let critics = Critics::new(
            restorer.resolution(),
            config.discriminator.roi.roi_size,
            config.discriminator.channels,
        )?;
        let mut expected = ParamStore::new();
        restorer.init(&mut expected, config.seed)?;
        critics.init(&mut expected, config.seed)?;
        let (mut params, mut adam) = (ParamStore::new(), Adam::default());
        for (name, t) in store.iter() {
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                adam.m.insert(p, t.clone())?;
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                adam.v.insert(p, t.clone())?;
            } else {
                params.insert(name, t.clone())?;
            }
        }
        check_layout(&expected, &params)?;
        let state = TrainState {
            params,
            adam,
            iteration: meta.iteration,
        };
        Self::assemble(config, restorer, critics, state)
    }
}

/// Loads the restoration network's parameters from a checkpoint.
pub fn load_restorer(path: &Path) -> Result<(RunConfig, Restorer, ParamStore<f32>)> {
    let (store, meta) = container::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    let config = meta.config;
    let restorer = Restorer::new(config.codec_config(), config.generator.clone())?;
    let mut expected = ParamStore::new();
    restorer.init(&mut expected, config.seed)?;
    let mut params = ParamStore::new();
    for name in expected.names() {
        params.insert(
            name,
            store
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("{}: missing {name}", path.display())))?
                .clone(),
        )?;
    }
    check_layout(&expected, &params)?;
    Ok((config, restorer, params))
}

fn check_layout(expected: &ParamStore<f32>, found: &ParamStore<f32>) -> Result<()> {
    for (name, t) in expected.iter() {
        let got = found
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, model expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if found.len() != expected.len() {
        let extra: Vec<&str> = found.names().filter(|n| !expected.contains(n)).collect();
        return Err(Error::Checkpoint(format!(
            "unexpected parameters: {extra:?}"
        )));
    }
    Ok(())
}

/// Copies every tensor of a container onto the parameter of the same name.
pub fn import_pretrained(params: &mut ParamStore<f32>, path: &Path) -> Result<usize> {
    let (store, _) = container::read(path)?;
    for (name, t) in store.iter() {
        let dst = params.get_mut(name).map_err(|_| {
            Error::Checkpoint(format!(
                "{}: no model parameter named {name}",
                path.display()
            ))
        })?;
        if dst.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: {name} has shape {:?}, model expects {:?}",
                path.display(),
                t.shape(),
                dst.shape()
            )));
        }
        *dst = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
    }
    Ok(store.len())
}

#[derive(Serialize)]
struct LogRecord<'a> {
    iteration: u64,
    lr_multiplier: f64,
    #[serde(flatten)]
    report: &'a LossReport,
}

/// Runs until `total_iterations`, appending one JSON line per iteration to
/// `train_log.jsonl` and writing checkpoints into `out_dir`. Returns the
/// final checkpoint path.
pub fn run(trainer: &mut Trainer, data: &Dataset, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let total = trainer.config.train.total_iterations;
    let every = trainer.config.train.checkpoint_every;
    while trainer.iteration() < total {
        let it = trainer.iteration();
        let report = trainer.step(data)?;
        let rec = LogRecord {
            iteration: it,
            lr_multiplier: lr_multiplier(it, &trainer.config.train),
            report: &report,
        };
        writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        let done = trainer.iteration();
        if every > 0 && done % every == 0 && done < total {
            trainer.save_checkpoint(&out_dir.join(format!("checkpoint_{done:08}.bin")))?;
        }
    }
    let last = out_dir.join("checkpoint_final.bin");
    trainer.save_checkpoint(&last)?;
    Ok(last)
}
