mod common;

use std::path::Path;

use bfr_core::degradation::degrade;
use bfr_core::extractor::ExtractorConfig;
use bfr_core::image::{save_image, ImageFormat, ImageTensor};
use bfr_core::metrics::{
    evaluate_dirs, frechet_distance, ggd_fit, niqe_fit, niqe_score, psnr, psnr_from_mse,
    render_table, ssim, Aggregate, MetricsConfig, NiqeConfig, SsimConfig,
};
use bfr_core::seed::rng_for;
use bfr_core::synthetic::synthetic_face;
use common::{heavy_degradation, pristine, random_image, ssim_oracle};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn psnr_analytic_cases() {
    let a = ImageTensor::filled(8, 8, 3, 0.3).unwrap();
    assert_eq!(psnr(&a, &a, 1.0, 100.0).unwrap(), 100.0);
    let b = ImageTensor::filled(8, 8, 3, 0.4).unwrap();
    assert!((psnr(&a, &b, 1.0, 100.0).unwrap() - 20.0).abs() < 1e-5);
    assert!((psnr_from_mse(0.0025, 1.0, 100.0) - 26.020599913279625).abs() < 1e-12);
    let small = ImageTensor::filled(4, 8, 3, 0.3).unwrap();
    assert!(psnr(&a, &small, 1.0, 100.0).is_err());
}

#[test]
fn ssim_matches_scalar_oracle() {
    let cfg = SsimConfig::default();
    for i in 0..50 {
        let (h, w) = (11 + i % 7, 12 + i % 5);
        let a = random_image(h, w, 2 * i as u64);
        let b = random_image(h, w, 2 * i as u64 + 1);
        let got = ssim(&a, &b, &cfg).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-6, "pair {i}");
    }
}

#[test]
fn ssim_identity_symmetry_and_size_check() {
    let cfg = SsimConfig::default();
    let a = random_image(20, 20, 1);
    let b = random_image(20, 20, 2);
    assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
    assert!((ssim(&a, &b, &cfg).unwrap() - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-9);
    let tiny = random_image(10, 20, 3);
    assert!(ssim(&tiny, &tiny, &cfg).is_err());
}

proptest! {
    #[test]
    fn psnr_decreases_with_mse(m in 1e-8f64..1.0, f in 1.001f64..10.0) {
        prop_assert!(psnr_from_mse(m * f, 1.0, 1e9) < psnr_from_mse(m, 1.0, 1e9));
    }

    #[test]
    fn ssim_bounded_and_symmetric(seed in 0u64..1000) {
        let cfg = SsimConfig::default();
        let a = random_image(12, 12, seed);
        let b = random_image(12, 12, seed + 7919);
        let ab = ssim(&a, &b, &cfg).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn ggd_fit_recovers_known_shapes() {
    let mut rng = rng_for(5, "test/ggd");
    let normal = Normal::new(0.0, 2.0).unwrap();
    let gauss: Vec<f64> = (0..200_000).map(|_| normal.sample(&mut rng)).collect();
    let (alpha, var) = ggd_fit(&gauss);
    assert!((alpha - 2.0).abs() < 0.05, "{alpha}");
    assert!((var - 4.0).abs() < 0.1, "{var}");
    let laplace: Vec<f64> = (0..200_000)
        .map(|_| {
            let u: f64 = rng.gen::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect();
    let (alpha, _) = ggd_fit(&laplace);
    assert!((alpha - 1.0).abs() < 0.05, "{alpha}");
}

#[test]
fn niqe_orders_degraded_above_pristine() {
    let cfg = NiqeConfig {
        patch_size: 32,
        ..NiqeConfig::default()
    };
    let clean = pristine(20);
    let model = niqe_fit(&clean, &cfg).unwrap();
    let mut rng = rng_for(3, "test/niqe");
    let degraded: Vec<ImageTensor> = clean
        .iter()
        .map(|img| degrade(img, &heavy_degradation(), &mut rng).unwrap())
        .collect();
    let mean = |set: &[ImageTensor]| {
        set.iter()
            .map(|i| niqe_score(i, &model).unwrap())
            .sum::<f64>()
            / set.len() as f64
    };
    let (p, d) = (mean(&clean), mean(&degraded));
    assert!(p < d, "pristine {p} degraded {d}");
    for img in clean.iter().chain(&degraded) {
        let s = niqe_score(img, &model).unwrap();
        assert!(s >= 0.0);
        assert_eq!(s, niqe_score(img, &model).unwrap());
    }
}

#[test]
fn niqe_preconditions() {
    let cfg = NiqeConfig {
        patch_size: 32,
        ..NiqeConfig::default()
    };
    assert!(niqe_fit(&pristine(9), &cfg).is_err());
    let model = niqe_fit(&pristine(10), &cfg).unwrap();
    let d = model.mean.len();
    for i in 0..d {
        for j in 0..d {
            assert_eq!(model.covariance[i * d + j], model.covariance[j * d + i]);
        }
    }
    let single_patch = ImageTensor::filled(32, 40, 3, 0.5).unwrap();
    assert!(niqe_score(&single_patch, &model).is_err());
}

#[test]
fn frechet_distance_oracles() {
    let mut rng = rng_for(9, "test/fid");
    let a: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..3).map(|_| rng.gen::<f64>()).collect())
        .collect();
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    let shift = [0.5, -1.0, 2.0];
    let b: Vec<Vec<f64>> = a
        .iter()
        .map(|v| v.iter().zip(shift).map(|(x, s)| x + s).collect())
        .collect();
    let expected: f64 = shift.iter().map(|s| s * s).sum();
    assert!((frechet_distance(&a, &b).unwrap() - expected).abs() < 1e-8);
    assert!(frechet_distance(&a[..1], &b).is_err());
}

fn write_set(dir: &Path, images: &[(String, ImageTensor)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (name, img) in images {
        save_image(img, dir.join(name), ImageFormat::Png, None).unwrap();
    }
}

fn named(seed: u64, n: usize) -> Vec<(String, ImageTensor)> {
    (0..n)
        .map(|i| {
            (
                format!("{i:03}.png"),
                synthetic_face(64, seed, i).unwrap().image.quantized(),
            )
        })
        .collect()
}

#[test]
fn evaluate_identical_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let set = named(1, 3);
    write_set(&tmp.path().join("a"), &set);
    write_set(&tmp.path().join("b"), &set);
    let report = evaluate_dirs(
        &tmp.path().join("a"),
        Some(&tmp.path().join("b")),
        None,
        &MetricsConfig::default(),
    )
    .unwrap();
    assert_eq!(report.counts.paired, 3);
    for s in &report.per_image {
        assert_eq!(s.psnr, Some(100.0));
        assert!((s.ssim.unwrap() - 1.0).abs() < 1e-12);
        assert!(s.errors.is_empty());
    }
    assert!(matches!(
        report.aggregate.lpips,
        Aggregate::Unavailable { .. }
    ));
    assert!(matches!(
        report.aggregate.fid,
        Aggregate::Unavailable { .. }
    ));
    assert!(matches!(
        report.aggregate.niqe,
        Aggregate::Unavailable { .. }
    ));
    let table = render_table(&report);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Image", "PSNR", "SSIM", "LPIPS", "FID", "NIQE"]);
}

#[test]
fn evaluate_reports_unpaired_files_and_averages() {
    let tmp = tempfile::tempdir().unwrap();
    let restored = named(1, 4);
    let mut reference = named(2, 4);
    reference.remove(1);
    reference.push((
        "extra.png".into(),
        synthetic_face(64, 2, 9).unwrap().image.quantized(),
    ));
    write_set(&tmp.path().join("r"), &restored);
    write_set(&tmp.path().join("g"), &reference);
    let cfg = MetricsConfig {
        deep: Some(ExtractorConfig::Random {
            layers: 2,
            channels: 4,
            seed: 0,
        }),
        ..MetricsConfig::default()
    };
    let report = evaluate_dirs(
        &tmp.path().join("r"),
        Some(&tmp.path().join("g")),
        None,
        &cfg,
    )
    .unwrap();
    let errors: Vec<&str> = report
        .per_image
        .iter()
        .filter(|s| !s.errors.is_empty())
        .map(|s| s.name.as_str())
        .collect();
    assert_eq!(errors, ["001.png", "extra.png"]);
    let psnrs: Vec<f64> = report.per_image.iter().filter_map(|s| s.psnr).collect();
    assert_eq!(psnrs.len(), 3);
    let mean = psnrs.iter().sum::<f64>() / 3.0;
    assert!((report.aggregate.psnr.value().unwrap() - mean).abs() < 1e-12);
    let lpips: Vec<f64> = report.per_image.iter().filter_map(|s| s.lpips).collect();
    assert!(
        (report.aggregate.lpips.value().unwrap() - lpips.iter().sum::<f64>() / 3.0).abs() < 1e-12
    );
    assert!(report.aggregate.fid.value().unwrap() >= 0.0);
}

#[test]
fn evaluate_without_reference_only_scores_niqe() {
    let tmp = tempfile::tempdir().unwrap();
    write_set(&tmp.path().join("r"), &named(1, 2));
    let cfg = MetricsConfig {
        niqe: NiqeConfig {
            patch_size: 32,
            ..NiqeConfig::default()
        },
        ..MetricsConfig::default()
    };
    let model = niqe_fit(&pristine(10), &cfg.niqe).unwrap();
    let report = evaluate_dirs(&tmp.path().join("r"), None, Some(&model), &cfg).unwrap();
    let a = &report.aggregate;
    assert!(a.niqe.value().is_some());
    for agg in [&a.psnr, &a.ssim, &a.lpips, &a.fid] {
        assert!(matches!(agg, Aggregate::Unavailable { .. }));
    }
    let json = serde_json::to_value(&report).unwrap();
    assert_eq!(
        json["aggregate"]["psnr"]["unavailable"],
        "no reference directory"
    );
}

#[test]
fn evaluate_is_independent_of_write_order() {
    let tmp = tempfile::tempdir().unwrap();
    let set = named(4, 4);
    let mut reversed = set.clone();
    reversed.reverse();
    write_set(&tmp.path().join("a"), &set);
    write_set(&tmp.path().join("b"), &reversed);
    write_set(&tmp.path().join("g"), &named(5, 4));
    let cfg = MetricsConfig::default();
    let ra = evaluate_dirs(
        &tmp.path().join("a"),
        Some(&tmp.path().join("g")),
        None,
        &cfg,
    )
    .unwrap();
    let rb = evaluate_dirs(
        &tmp.path().join("b"),
        Some(&tmp.path().join("g")),
        None,
        &cfg,
    )
    .unwrap();
    assert_eq!(ra, rb);
}
