mod common;

use std::collections::BTreeMap;

use bfr_autograd::{ParamStore, Tape, Tensor};
use bfr_core::discriminator::Region;
use bfr_core::extractor::{ConvStack, FeatureExtractor, Identity};
use bfr_core::losses::{
    adv_combined, adv_g_graph, adv_g_loss, adv_local_graph, adv_local_loss, content_graph,
    d_loss_graph, discriminator_loss, identity_graph, local_discriminator_loss, total_loss,
    Components, LossWeights,
};
use common::{max_grad_error, random};
use proptest::prelude::*;

fn w() -> LossWeights {
    LossWeights::default()
}

fn probs(v: [f64; 3]) -> BTreeMap<Region, f64> {
    Region::ALL.into_iter().zip(v).collect()
}

#[test]
fn default_weights() {
    let w = w();
    assert_eq!(
        (
            w.lambda_g,
            w.lambda_l,
            w.lambda_l1,
            w.lambda_fm,
            w.lambda_fp
        ),
        (0.5, 3.0, 8.0, 0.02, 10.0)
    );
    assert!(LossWeights {
        lambda_fm: -1.0,
        ..w
    }
    .validate()
    .is_err());
}

#[test]
fn adversarial_cases() {
    assert!((adv_g_loss(0.0) - 0.6931).abs() < 1e-4);
    assert!((adv_g_loss(30.0) - 9.36e-14).abs() < 1e-15);
    assert!((adv_g_loss(-30.0) - 30.0).abs() < 1e-9);
    assert!((adv_local_loss(&probs([0.5; 3])).unwrap() + 2.0794).abs() < 1e-4);
    assert!((adv_local_loss(&probs([1.0 - 1e-6; 3])).unwrap() + 41.45).abs() < 1e-2);
    assert!((adv_local_loss(&probs([1.0 - 1e-12; 3])).unwrap() - 3.0 * 1e-6f64.ln()).abs() < 1e-6);
    let mut two = probs([0.5; 3]);
    two.remove(&Region::RightEye);
    assert!(adv_local_loss(&two).is_err());
    assert!(adv_local_loss(&probs([0.5, 0.0, 0.5])).is_err());

    assert!((adv_combined(0.6931, -2.0794, &w()) + 5.8917).abs() < 1e-4);
    assert_eq!(adv_combined(0.8, 0.0, &w()), 0.4);
    let zero = LossWeights {
        lambda_g: 0.0,
        lambda_l: 0.0,
        ..w()
    };
    assert_eq!(adv_combined(0.8, -2.0, &zero), 0.0);
}

#[test]
fn discriminator_cases() {
    assert!((discriminator_loss(0.0, 0.0) - 1.3863).abs() < 1e-4);
    assert!((local_discriminator_loss(0.9, 0.1).unwrap() - 0.2107).abs() < 1e-4);
    assert!(discriminator_loss(500.0, -500.0) < 1e-200);
    assert!(local_discriminator_loss(1.0, 0.1).is_err());
}

#[test]
fn total_cases() {
    let c = Components {
        adv_g: 0.6931,
        adv_l: -2.0794,
        l1: 8.0,
        fm: 0.02,
        fp: 1.0,
        rec: 0.0,
    };
    let r = total_loss(c, &w(), 0.0, 0.0);
    assert!((r.total - 3.1283).abs() < 1e-4);
    assert_eq!(r.combination_error(&w()), 0.0);
    assert_eq!(total_loss(Components::default(), &w(), 0.0, 0.0).total, 0.0);
    let adv = adv_combined(c.adv_g, c.adv_l, &w());
    let terms = [adv, c.l1, c.fm, c.fp, c.rec];
    let fwd: f64 = terms.iter().sum();
    let rev: f64 = terms.iter().rev().sum();
    assert!((fwd - rev).abs() < 1e-12 && (fwd - r.total).abs() < 1e-12);
}

fn content(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    ex: &dyn FeatureExtractor<f64>,
    w: &LossWeights,
) -> (f64, f64) {
    let mut tape = Tape::inference();
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let (l1, fm) = content_graph(&mut tape, a, b, ex, w).unwrap();
    (tape.scalar(l1), tape.scalar(fm))
}

fn identity(x: &Tensor<f64>, y: &Tensor<f64>, w: &LossWeights) -> f64 {
    let mut tape = Tape::inference();
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let l = identity_graph(&mut tape, a, b, &Identity, w).unwrap();
    tape.scalar(l)
}

#[test]
fn content_cases() {
    let x = random(&[2, 3, 4, 4], 1);
    assert_eq!(content(&x, &x, &Identity, &w()), (0.0, 0.0));
    let (l1, fm) = content(
        &Tensor::zeros(vec![1, 3, 2, 2]),
        &Tensor::full(vec![1, 3, 2, 2], 1.0),
        &Identity,
        &w(),
    );
    assert!((l1 + fm - 8.02).abs() < 1e-12);
    let mut tape = Tape::<f64>::inference();
    let (a, b) = (
        tape.constant(Tensor::zeros(vec![1, 3, 2, 2])),
        tape.constant(Tensor::zeros(vec![1, 3, 4, 4])),
    );
    assert!(content_graph(&mut tape, a, b, &Identity, &w()).is_err());
}

/// Straight-loop content loss with the identity extractor.
fn content_oracle(x: &[f64], y: &[f64], n: usize, w: &LossWeights) -> f64 {
    let l1 = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
    let per = x.len() / n;
    let mut fm = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in i * per..(i + 1) * per {
            s += (x[j] - y[j]) * (x[j] - y[j]);
        }
        fm += (s / per as f64).sqrt();
    }
    w.lambda_l1 * l1 + w.lambda_fm * fm / n as f64
}

#[test]
fn content_matches_loop_oracle() {
    for seed in 0..10 {
        let x = random(&[3, 3, 4, 4], seed);
        let y = random(&[3, 3, 4, 4], seed + 100);
        let (l1, fm) = content(&x, &y, &Identity, &w());
        let expect = content_oracle(x.data(), y.data(), 3, &w());
        assert!((l1 + fm - expect).abs() < 1e-6, "{} vs {expect}", l1 + fm);
    }
}

#[test]
fn identity_cases() {
    let x = random(&[2, 3, 4, 4], 2);
    assert_eq!(identity(&x, &x, &w()), 0.0);
    let shifted = x.map(|v| v + 0.1);
    assert!((identity(&x, &shifted, &w()) - 1.0).abs() < 1e-12);
}

#[test]
fn doubling_l1_weight_scales_only_l1() {
    let x = random(&[2, 3, 8, 8], 3);
    let y = random(&[2, 3, 8, 8], 4);
    let ex = ConvStack::<f64>::random(2, 4, 5).unwrap();
    let w1 = w();
    let w2 = LossWeights {
        lambda_l1: 2.0 * w1.lambda_l1,
        ..w1.clone()
    };
    let (a1, f1) = content(&x, &y, &ex, &w1);
    let (a2, f2) = content(&x, &y, &ex, &w2);
    assert_eq!(a2, 2.0 * a1);
    assert_eq!(f1, f2);
    assert_eq!(identity(&x, &y, &w1), identity(&x, &y, &w2));
}

#[test]
fn graphs_agree_with_scalar_forms() {
    let logits = [-2.0, 0.3, 4.0];
    let mut tape = Tape::<f64>::inference();
    let l = tape.constant(Tensor::new(vec![3, 1], logits.to_vec()).unwrap());
    let g = adv_g_graph(&mut tape, l);
    let mean = logits.iter().map(|&v| adv_g_loss(v)).sum::<f64>() / 3.0;
    assert!((tape.scalar(g) - mean).abs() < 1e-12);

    let region_logits = [0.0, 1.5, -0.7];
    let vars: Vec<_> = region_logits
        .iter()
        .map(|&v| tape.constant(Tensor::new(vec![1, 1], vec![v]).unwrap()))
        .collect();
    let loc = adv_local_graph(&mut tape, &vars).unwrap();
    let p = region_logits.map(|v| 1.0 / (1.0 + (-v as f64).exp()));
    assert!((tape.scalar(loc) - adv_local_loss(&probs(p)).unwrap()).abs() < 1e-12);
    assert!(adv_local_graph(&mut tape, &vars[..2]).is_err());

    let huge = tape.constant(Tensor::new(vec![1, 1], vec![100.0]).unwrap());
    let sat = adv_local_graph(&mut tape, &[huge, huge, huge]).unwrap();
    assert!((tape.scalar(sat) - 3.0 * 1e-6f64.ln()).abs() < 1e-6);

    let (r, f) = (
        tape.constant(Tensor::new(vec![2, 1], vec![0.5, -1.0]).unwrap()),
        tape.constant(Tensor::new(vec![2, 1], vec![0.2, 2.0]).unwrap()),
    );
    let d = d_loss_graph(&mut tape, r, f).unwrap();
    let expect = (discriminator_loss(0.5, 0.2) + discriminator_loss(-1.0, 2.0)) / 2.0;
    assert!((tape.scalar(d) - expect).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let none = ParamStore::new();
    let gt = random(&[1, 3, 4, 4], 10);
    let fake = random(&[1, 3, 4, 4], 11);
    let w = w();
    let checks: Vec<(&str, f64)> = vec![
        (
            "content",
            max_grad_error(&[fake.clone()], &none, |t, _, v| {
                let g = t.constant(gt.clone());
                let (l1, fm) = content_graph(t, g, v[0], &Identity, &w).unwrap();
                t.add(l1, fm).unwrap()
            }),
        ),
        (
            "identity",
            max_grad_error(&[fake.clone()], &none, |t, _, v| {
                let g = t.constant(gt.clone());
                identity_graph(t, g, v[0], &Identity, &w).unwrap()
            }),
        ),
        (
            "adv_g",
            max_grad_error(&[random(&[4, 1], 12)], &none, |t, _, v| {
                adv_g_graph(t, v[0])
            }),
        ),
        (
            "adv_l",
            max_grad_error(
                &[
                    random(&[2, 1], 13),
                    random(&[2, 1], 14),
                    random(&[2, 1], 15),
                ],
                &none,
                |t, _, v| adv_local_graph(t, v).unwrap(),
            ),
        ),
        (
            "d",
            max_grad_error(
                &[random(&[3, 1], 16), random(&[3, 1], 17)],
                &none,
                |t, _, v| d_loss_graph(t, v[0], v[1]).unwrap(),
            ),
        ),
    ];
    for (name, err) in checks {
        assert!(err < 1e-4, "{name}: {err:e}");
    }
}

proptest! {
    #[test]
    fn losses_respect_their_infima(logit in -1e3f64..1e3, p in prop::array::uniform3(1e-9f64..1.0 - 1e-12), q in 1e-9f64..1.0 - 1e-9) {
        prop_assert!(adv_g_loss(logit) >= 0.0 && adv_g_loss(logit).is_finite());
        let l = adv_local_loss(&probs(p)).unwrap();
        prop_assert!(l >= 3.0 * 1e-6f64.ln() - 1e-9 && l <= 0.0);
        prop_assert!(discriminator_loss(logit, -logit) >= 0.0);
        prop_assert!(local_discriminator_loss(q, 1.0 - q).unwrap() >= 0.0);
    }
}
