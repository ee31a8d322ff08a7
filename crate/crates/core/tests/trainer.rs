mod common;

use std::collections::BTreeSet;

use bfr_autograd::ParamStore;
use bfr_core::config::{LearningRates, RunConfig, TrainConfig};
use bfr_core::discriminator::GLOBAL_NAMESPACE;
use bfr_core::losses::LossReport;
use bfr_core::trainer::{lr_multiplier, GroupKind, Trainer};
use bfr_core::Error;
use common::{face_data, tiny_config};

fn steps(t: &mut Trainer, data: &bfr_core::trainer::Dataset, n: usize) -> Vec<LossReport> {
    (0..n).map(|_| t.step(data).unwrap()).collect()
}

fn with_prefix<'a>(
    store: &'a ParamStore<f32>,
    prefix: &'a str,
) -> impl Iterator<Item = (&'a str, &'a [f32])> + 'a {
    store
        .iter()
        .filter(move |(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n, t.data()))
}

#[test]
fn groups_carry_their_learning_rates() {
    let t = Trainer::new(tiny_config()).unwrap();
    let expect = [
        (GroupKind::Codec, 2e-3),
        (GroupKind::DiscGlobal, 2e-5),
        (GroupKind::DiscLocal, 2e-3),
        (GroupKind::Generator, 2e-4),
        (GroupKind::NoiseBranches, 2e-3),
    ];
    for (kind, lr) in expect {
        let g = t.optim.group(kind);
        assert_eq!(g.lr, lr);
        assert!(!g.params.is_empty());
        assert!(g.params.iter().all(|p| GroupKind::of(p) == Some(kind)));
    }
    t.optim.audit(t.params()).unwrap();
    let mut seen = BTreeSet::new();
    for name in t
        .optim
        .groups
        .iter()
        .flat_map(|g| &g.params)
        .chain(&t.optim.excluded)
    {
        assert!(seen.insert(name.clone()));
    }
    assert_eq!(seen.len(), t.params().len());
}

#[test]
fn orphan_parameters_are_rejected() {
    let mut store = ParamStore::<f32>::new();
    store
        .insert("stray/weight", bfr_autograd::Tensor::zeros(vec![1]))
        .unwrap();
    assert!(
        bfr_core::trainer::OptimizerSet::build(&LearningRates::default(), &store, |_| false)
            .is_err()
    );
}

#[test]
fn frozen_layers_leave_every_group() {
    let mut cfg = tiny_config();
    cfg.codec.base_resolution = 256;
    cfg.discriminator.n_frozen = Some(5);
    let t = Trainer::new(cfg).unwrap();
    assert_eq!(t.freeze.names.len(), 5);
    let expect: BTreeSet<String> = (0..5)
        .flat_map(|i| ["weight", "bias"].map(|s| format!("{GLOBAL_NAMESPACE}/conv{i}.{s}")))
        .collect();
    let excluded: BTreeSet<String> = t.optim.excluded.iter().cloned().collect();
    assert_eq!(excluded, expect);
    for g in &t.optim.groups {
        assert!(g.params.iter().all(|p| !expect.contains(p)));
    }
}

#[test]
fn schedule_halves_at_milestones() {
    let cfg = TrainConfig {
        total_iterations: 1000,
        ..TrainConfig::default()
    };
    assert_eq!(lr_multiplier(0, &cfg), 1.0);
    assert_eq!(lr_multiplier(500, &cfg), 1.0);
    assert_eq!(lr_multiplier(700, &cfg), 0.5);
    assert_eq!(lr_multiplier(900, &cfg), 0.25);
}

#[test]
fn same_seed_same_reports() {
    let data = face_data(4, 16, false);
    let mut a = Trainer::new(tiny_config()).unwrap();
    let mut b = Trainer::new(tiny_config()).unwrap();
    let (ra, rb) = (steps(&mut a, &data, 4), steps(&mut b, &data, 4));
    assert_eq!(ra, rb);
    assert_eq!(a.params(), b.params());
    let w = &a.config.loss;
    for r in &ra {
        assert!(r.combination_error(w) <= 1e-6 * r.total.abs().max(1.0));
        assert!(r.is_finite());
    }
}

#[test]
fn local_switch_silences_local_terms() {
    let mut cfg = tiny_config();
    cfg.ablation.use_local_d = false;
    let data = face_data(4, 16, false);
    let mut t = Trainer::new(cfg).unwrap();
    let before = t.params().clone();
    for r in steps(&mut t, &data, 4) {
        assert_eq!((r.adv_l, r.d_local), (0.0, 0.0));
    }
    for ns in ["disc_left_eye/", "disc_right_eye/", "disc_mouth/"] {
        assert!(
            with_prefix(t.params(), ns).eq(with_prefix(&before, ns)),
            "{ns}"
        );
    }
}

#[test]
fn prior_stays_fixed_without_finetuning() {
    let mut cfg = tiny_config();
    cfg.ablation.finetune_prior = false;
    let data = face_data(4, 16, false);
    let mut t = Trainer::new(cfg).unwrap();
    let before = t.params().clone();
    steps(&mut t, &data, 4);
    assert!(with_prefix(t.params(), "generator/").eq(with_prefix(&before, "generator/")));
    assert!(!with_prefix(t.params(), "codec/").eq(with_prefix(&before, "codec/")));
    assert!(!with_prefix(t.params(), "noise_branches/").eq(with_prefix(&before, "noise_branches/")));
}

#[test]
fn null_training_changes_nothing() {
    let mut cfg = tiny_config();
    cfg.train.lr = LearningRates::zero();
    cfg.ablation.use_mmrb = false;
    cfg.ablation.use_local_d = false;
    cfg.ablation.finetune_prior = false;
    cfg.ablation.freeze_d = false;
    let data = face_data(4, 16, false);
    let mut t = Trainer::new(cfg).unwrap();
    let before = t.params().clone();
    steps(&mut t, &data, 3);
    assert_eq!(t.params(), &before);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let data = face_data(4, 16, false);
    let mut t = Trainer::new(tiny_config()).unwrap();
    steps(&mut t, &data, 2);
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("a.bin");
    t.save_checkpoint(&p).unwrap();
    let r = Trainer::resume(tiny_config(), &p, false).unwrap();
    assert_eq!(r.iteration(), 2);
    assert_eq!(r.checkpoint_bytes().unwrap(), std::fs::read(&p).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_twin() {
    let data = face_data(4, 16, true);
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("k.bin");
    let k = 3;
    let mut a = Trainer::new(tiny_config()).unwrap();
    steps(&mut a, &data, k);
    a.save_checkpoint(&ckpt).unwrap();
    let tail = steps(&mut a, &data, 5);
    let mut b = Trainer::resume(tiny_config(), &ckpt, false).unwrap();
    assert_eq!(steps(&mut b, &data, 5), tail);
    assert_eq!(a.params(), b.params());
}

#[test]
fn resume_checks_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.bin");
    Trainer::new(tiny_config())
        .unwrap()
        .save_checkpoint(&p)
        .unwrap();
    let mut other = tiny_config();
    other.loss.lambda_l1 = 4.0;
    assert!(matches!(
        Trainer::resume(other.clone(), &p, false),
        Err(Error::Config(_))
    ));
    assert!(Trainer::resume(other, &p, true).is_ok());
    let mut moved = tiny_config();
    moved.paths.out_dir = Some("elsewhere".into());
    assert!(Trainer::resume(moved, &p, false).is_ok());
}

#[test]
fn corrupted_payload_names_the_entry() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.bin");
    let t = Trainer::new(tiny_config()).unwrap();
    let mut bytes = t.checkpoint_bytes().unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&p, &bytes).unwrap();
    let Err(Error::Checkpoint(msg)) = Trainer::resume(tiny_config(), &p, false) else {
        panic!("expected a checkpoint error")
    };
    let named = t
        .params()
        .names()
        .find(|n| msg.contains(&format!("entry {n}:")));
    assert!(named.is_some(), "{msg}");
}

#[test]
fn non_finite_loss_aborts() {
    let data = face_data(2, 16, false);
    let mut t = Trainer::new(tiny_config()).unwrap();
    t.state
        .params
        .get_mut("generator/const")
        .unwrap()
        .data_mut()[0] = f32::NAN;
    assert!(matches!(t.step(&data), Err(Error::NonFinite { .. })));
}

#[test]
fn presets_carry_reference_schedules() {
    let d = RunConfig::desk();
    assert_eq!(
        (
            d.train.total_iterations,
            d.train.batch_size,
            d.codec.base_resolution
        ),
        (700, 4, 64)
    );
    assert_eq!(d.train.betas, [0.0, 0.99]);
    assert_eq!(d.train.milestones, [0.6, 0.8]);
    let p = RunConfig::paper();
    assert_eq!(
        (
            p.train.total_iterations,
            p.train.batch_size,
            p.codec.base_resolution
        ),
        (700_000, 4, 512)
    );
    assert_eq!(p.discriminator.n_frozen, Some(5));
}
