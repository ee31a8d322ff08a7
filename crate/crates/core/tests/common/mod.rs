//! Oracles, fixtures and finite-difference checks shared by the integration tests.
#![allow(dead_code)]

use bfr_autograd::{ParamStore, Tape, Tensor, Var};
use bfr_core::degradation::{DegradationParams, Stages};
use bfr_core::image::ImageTensor;
use bfr_core::seed::rng_for;
use bfr_core::synthetic::synthetic_face;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Scalar reduction with a fixed random projection.
pub fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = t.shape(y).to_vec();
    let p = t.constant(random(&shape, seed));
    let m = t.mul(y, p).unwrap();
    t.sum(m)
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest norm-wise relative error between analytic and central-difference
/// gradients, over every input and every parameter in `store`.
pub fn max_grad_error(
    inputs: &[Tensor<f64>],
    store: &ParamStore<f64>,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |ins: &[Tensor<f64>], st: &ParamStore<f64>| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.variable(x.clone())).collect();
        let o = f(&mut t, st, &vs);
        t.scalar(o)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = f(&mut tape, store, &vars);
    let grads = tape.backward(out).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let numeric: Vec<f64> = (0..inputs[k].numel())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                (eval(&plus, store) - eval(&minus, store)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let n = store.get(&name).unwrap().numel();
        let analytic = grads
            .param(&name)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let numeric: Vec<f64> = (0..n)
            .map(|i| {
                let mut plus = store.clone();
                plus.get_mut(&name).unwrap().data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(&name).unwrap().data_mut()[i] -= h;
                (eval(inputs, &plus) - eval(inputs, &minus)) / (2.0 * h)
            })
            .collect();
        let e = rel_error(&analytic, &numeric);
        assert!(e.is_finite(), "{name}");
        worst = worst.max(e);
    }
    worst
}

fn prelu(x: f64, a: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        a * x
    }
}

/// Hand-set two-channel MMRB evaluated on a 1×1 map through scalar
/// arithmetic. Off-centre taps never touch the image, so only the centre
/// weight of each kernel matters; they are filled with junk to prove it.
pub fn mmrb_scalar_case() -> (bfr_core::mmrb::Mmrb, ParamStore<f64>, [f64; 2], [f64; 2]) {
    use bfr_core::mmrb::Mmrb;
    let block = Mmrb::new("m", 2, false).unwrap();
    let mut store = ParamStore::new();
    let kernel = |out: usize, inp: usize, k: usize, centre: &[f64]| {
        let mut data = vec![7.5; out * inp * k * k];
        for o in 0..out {
            for i in 0..inp {
                data[((o * inp + i) * k + k / 2) * k + k / 2] = centre[o * inp + i];
            }
        }
        Tensor::new(vec![out, inp, k, k], data).unwrap()
    };
    let (a1, a2, b1, b2, w3) = (
        [0.8],
        [-1.3],
        [0.6, -0.9],
        [1.1, 0.4],
        [0.5, -0.7, 0.2, 0.9],
    );
    store.insert("m/b1a.weight", kernel(1, 1, 3, &a1)).unwrap();
    store.insert("m/b2a.weight", kernel(1, 1, 5, &a2)).unwrap();
    store.insert("m/b1b.weight", kernel(1, 2, 3, &b1)).unwrap();
    store.insert("m/b2b.weight", kernel(1, 2, 5, &b2)).unwrap();
    store.insert("m/fuse.weight", kernel(2, 2, 1, &w3)).unwrap();
    let slopes = [0.25, 0.1, 0.3, 0.05, 0.2];
    for (i, s) in slopes.iter().enumerate() {
        store
            .insert(
                format!("m/act{}", i + 1),
                Tensor::new(vec![1], vec![*s]).unwrap(),
            )
            .unwrap();
    }
    let x = [0.7, 0.45];
    let p1 = prelu(a1[0] * x[0], slopes[0]);
    let p2 = prelu(a2[0] * x[1], slopes[1]);
    let q1 = prelu(b1[0] * p1 + b1[1] * p2, slopes[2]);
    let q2 = prelu(b2[0] * p1 + b2[1] * p2, slopes[3]);
    let p = [
        prelu(w3[0] * q1 + w3[1] * q2, slopes[4]),
        prelu(w3[2] * q1 + w3[3] * q2, slopes[4]),
    ];
    (block, store, x, [x[0] + p[0], x[1] + p[1]])
}

/// Trains a toy global discriminator for `steps` Adam updates with
/// `n_frozen` input-side layers frozen. Returns parameters before and
/// after, and the names the freeze plan excludes.
pub fn freeze_run(n_frozen: usize, steps: u64) -> (ParamStore<f32>, ParamStore<f32>, Vec<String>) {
    use bfr_core::codec::ChannelSchedule;
    use bfr_core::config::TrainConfig;
    use bfr_core::discriminator::{apply_freeze, Discriminator};
    use bfr_core::losses::d_loss_graph;
    use bfr_core::seed::rng_from;
    use bfr_core::trainer::{Adam, GroupKind, OptimizerSet};

    let disc = Discriminator::new("disc_global", 16, ChannelSchedule { base: 4, max: 8 }).unwrap();
    let mut store = ParamStore::new();
    disc.init(&mut store, &mut rng_from(3)).unwrap();
    let before = store.clone();
    let plan = apply_freeze(&disc, n_frozen).unwrap();
    let cfg = TrainConfig::default();
    let optim = OptimizerSet::build(&cfg.lr, &store, |n| plan.freezes(n)).unwrap();
    optim.audit(&store).unwrap();
    let group = optim.group(GroupKind::DiscGlobal).clone();
    let mut adam = Adam::default();
    for step in 0..steps {
        let trainable: std::collections::BTreeSet<String> = group.params.iter().cloned().collect();
        let mut tape = Tape::with_trainable(move |n| trainable.contains(n));
        let real = tape.constant(
            random(&[2, 3, 16, 16], 100 + step)
                .map(|v| 0.5 + 0.5 * v)
                .cast(),
        );
        let fake = tape.constant(
            random(&[2, 3, 16, 16], 200 + step)
                .map(|v| 0.5 + 0.2 * v)
                .cast(),
        );
        let rl = disc.forward(&mut tape, &store, real).unwrap();
        let fl = disc.forward(&mut tape, &store, fake).unwrap();
        let loss = d_loss_graph(&mut tape, rl, fl).unwrap();
        let grads = tape.backward(loss).unwrap();
        adam.update(&mut store, &grads, &group, group.lr, &cfg, step + 1)
            .unwrap();
    }
    (before, store, optim.excluded)
}

/// `n` synthetic faces at `size`², each degraded with its own draw from
/// the default ranges. Landmarks are attached when `landmarks` is set.
pub fn face_data(n: usize, size: usize, landmarks: bool) -> bfr_core::trainer::Dataset {
    use bfr_core::degradation::{degrade, sample_params, DegradationRanges};
    use bfr_core::seed::rng_from;
    use bfr_core::trainer::{Dataset, Sample};
    use synthetic_face;

    let samples = (0..n)
        .map(|i| {
            let face = synthetic_face(size, 0, i).unwrap();
            let mut rng = rng_from(i as u64);
            let p = sample_params(&mut rng, &DegradationRanges::default()).unwrap();
            let lq = degrade(&face.image, &p, &mut rng).unwrap().quantized();
            let lm = landmarks.then_some(face.landmarks);
            Sample {
                name: format!("{i:02}"),
                lq,
                hq: face.image.quantized(),
                landmarks: lm,
            }
        })
        .collect();
    Dataset::new(samples).unwrap()
}

/// A 16×16 model small enough for many steps per test.
pub fn tiny_config() -> bfr_core::config::RunConfig {
    use bfr_core::codec::ChannelSchedule;
    use bfr_core::config::RunConfig;

    let mut cfg = RunConfig::desk();
    cfg.codec.base_resolution = 16;
    cfg.codec.channels = ChannelSchedule { base: 2, max: 8 };
    cfg.codec.latent_dim = 8;
    cfg.generator.mapping_layers = 2;
    cfg.discriminator.channels = ChannelSchedule { base: 2, max: 8 };
    cfg.discriminator.roi.roi_size = 8;
    cfg.train.batch_size = 2;
    cfg.train.total_iterations = 20;
    cfg
}

pub fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = rng_for(seed, "test/image");
    let data = (0..h * w * 3).map(|_| rng.gen::<f32>()).collect();
    ImageTensor::new(h, w, 3, data).unwrap()
}

/// Straight-loop SSIM with an explicit 2-D window.
pub fn ssim_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (h, w) = (a.height(), a.width());
    let luma = |img: &ImageTensor, y: usize, x: usize| {
        0.299 * img.get(y, x, 0) as f64
            + 0.587 * img.get(y, x, 1) as f64
            + 0.114 * img.get(y, x, 2) as f64
    };
    let n = 11;
    let mut win = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let k = win[i][j] / total;
                    let (p, q) = (luma(a, y + i, x + j), luma(b, y + i, x + j));
                    mx += k * p;
                    my += k * q;
                    sxx += k * p * p;
                    syy += k * q * q;
                    sxy += k * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn pristine(n: usize) -> Vec<ImageTensor> {
    (0..n)
        .map(|i| synthetic_face(64, 11, i).unwrap().image)
        .collect()
}

pub fn heavy_degradation() -> DegradationParams {
    DegradationParams {
        noise_sigma: 25.0,
        jpeg_q: 5,
        stages: Stages {
            noise: true,
            jpeg: true,
            ..Stages::none()
        },
        ..DegradationParams::identity()
    }
}

/// Worst finite-difference error of every differentiable building block,
/// on double-precision inputs of at most 4×4×4.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    use bfr_core::codec::{recon_targets, restoration_loss, ChannelSchedule, Codec, CodecConfig};
    use bfr_core::extractor::{ConvStack, Identity};
    use bfr_core::losses::{
        adv_g_graph, adv_local_graph, content_graph, d_loss_graph, identity_graph, LossWeights,
    };
    use bfr_core::mmrb::Mmrb;
    use bfr_core::seed::rng_from;

    let mut out = Vec::new();
    for (name, shared) in [("mmrb", false), ("mmrb_shared", true)] {
        let b = Mmrb::new("m", 4, shared).unwrap();
        let mut store = ParamStore::new();
        b.init(&mut store, &mut rng_from(6)).unwrap();
        let err = max_grad_error(&[random(&[1, 4, 4, 4], 7)], &store, |t, s, v| {
            let y = b.forward(t, s, v[0]).unwrap();
            project(t, y, 8)
        });
        out.push((name, err));
    }

    let none = ParamStore::new();
    let gt = random(&[1, 3, 4, 4], 10);
    let fake = random(&[1, 3, 4, 4], 11);
    let w = LossWeights::default();
    let stack = ConvStack::<f64>::random(2, 4, 5).unwrap();
    out.push((
        "content",
        max_grad_error(&[fake.clone()], &none, |t, _, v| {
            let g = t.constant(gt.clone());
            let (l1, fm) = content_graph(t, g, v[0], &stack, &w).unwrap();
            t.add(l1, fm).unwrap()
        }),
    ));
    out.push((
        "identity",
        max_grad_error(&[fake], &none, |t, _, v| {
            let g = t.constant(gt.clone());
            identity_graph(t, g, v[0], &Identity, &w).unwrap()
        }),
    ));
    out.push((
        "adv_g",
        max_grad_error(&[random(&[4, 1], 12)], &none, |t, _, v| {
            adv_g_graph(t, v[0])
        }),
    ));
    out.push((
        "adv_local",
        max_grad_error(
            &[
                random(&[2, 1], 13),
                random(&[2, 1], 14),
                random(&[2, 1], 15),
            ],
            &none,
            |t, _, v| adv_local_graph(t, v).unwrap(),
        ),
    ));
    out.push((
        "discriminator",
        max_grad_error(
            &[random(&[3, 1], 16), random(&[3, 1], 17)],
            &none,
            |t, _, v| d_loss_graph(t, v[0], v[1]).unwrap(),
        ),
    ));

    let cfg = CodecConfig {
        base_resolution: 8,
        noise_min_resolution: 8,
        channels: ChannelSchedule { base: 2, max: 4 },
        latent_dim: 4,
        ..CodecConfig::desk()
    };
    let codec = Codec::new(cfg.clone()).unwrap();
    let mut store = ParamStore::<f64>::new();
    codec.init(&mut store, &mut rng_from(11)).unwrap();
    let hq =
        ImageTensor::from_fn(8, 8, 3, |y, x, c| ((y * 5 + x * 3 + c) % 11) as f32 / 10.0).unwrap();
    let targets = recon_targets::<f64>(&[hq], &cfg.scales()).unwrap();
    out.push((
        "restoration",
        max_grad_error(&[random(&[1, 3, 8, 8], 12)], &store, |t, s, v| {
            let enc = codec.encode(t, s, v[0]).unwrap();
            let dec = codec.decode(t, s, &enc).unwrap();
            restoration_loss(t, &dec.recons, &targets, 1.0).unwrap()
        }),
    ));
    out
}
