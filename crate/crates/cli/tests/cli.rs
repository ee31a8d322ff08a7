use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bfr_core::config::RunConfig;
use bfr_core::image::{load_image, resize, save_image, ImageFormat, ResizeMethod};
use bfr_core::synthetic::synthetic_face;

fn bfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bfr"))
        .args(args)
        .env_remove("BFR_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn faces(dir: &Path, n: usize, size: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let img = synthetic_face(size, 21, i).unwrap().image;
        save_image(
            &img,
            dir.join(format!("face{i:02}.png")),
            ImageFormat::Png,
            None,
        )
        .unwrap();
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.push((
                p.strip_prefix(dir).unwrap().to_path_buf(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

#[test]
fn synthesize_writes_manifest_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let hq = tmp.path().join("hq");
    faces(&hq, 3, 64);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&bfr(&[
            "synthesize",
            "--hq-dir",
            s(&hq),
            "--out-dir",
            s(out),
            "--count",
            "5",
            "--seed",
            "4",
        ]));
    }
    let manifest = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 11);
    assert_eq!(ta, tb);
}

#[test]
fn synthesize_missing_input_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let res = bfr(&[
        "synthesize",
        "--hq-dir",
        s(&tmp.path().join("nope")),
        "--out-dir",
        s(&out),
        "--count",
        "2",
    ]);
    assert_eq!(res.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn invalid_config_fails_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let res = bfr(&[
        "train",
        "--set",
        "train.batch_size=0",
        "--data-dir",
        s(tmp.path()),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nno_such_key = 1\n").unwrap();
    let res = bfr(&[
        "--config",
        s(&cfg),
        "train",
        "--data-dir",
        s(tmp.path()),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("no_such_key"));
    assert!(!out.exists());
}

#[test]
fn help_enumerates_config_keys() {
    let out = bfr(&["--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in RunConfig::keys() {
        assert!(text.contains(&key), "{key}");
    }
}

fn log_lines(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Trains a few iterations through the CLI, restores, evaluates, and
/// resumes from a mid-run checkpoint.
#[test]
fn train_restore_evaluate_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let hq = tmp.path().join("hq");
    faces(&hq, 4, 64);
    let data = tmp.path().join("data");
    ok(&bfr(&[
        "synthesize",
        "--hq-dir",
        s(&hq),
        "--out-dir",
        s(&data),
        "--count",
        "4",
    ]));

    let run = tmp.path().join("run");
    let short = [
        "--set",
        "train.total_iterations=4",
        "--set",
        "train.checkpoint_every=2",
    ];
    let mut args = vec!["train", "--data-dir", s(&data), "--out-dir", s(&run)];
    args.extend(short);
    ok(&bfr(&args));
    assert!(run.join("checkpoint_00000002.bin").is_file());
    let ckpt = run.join("checkpoint_final.bin");
    assert!(ckpt.is_file());
    let full = log_lines(&run);
    assert_eq!(full.len(), 4);

    let twin = tmp.path().join("twin");
    let mid = run.join("checkpoint_00000002.bin");
    let mut args = vec![
        "train",
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&twin),
        "--resume",
        s(&mid),
    ];
    args.extend(short);
    ok(&bfr(&args));
    assert_eq!(log_lines(&twin), full[2..].to_vec());

    let mut args = vec![
        "train",
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&twin),
        "--resume",
        s(&mid),
        "--no-mmrb",
    ];
    args.extend(short);
    assert_eq!(bfr(&args).status.code(), Some(2));

    let lq = data.join("lq");
    let first = fs::read_dir(&lq).unwrap().next().unwrap().unwrap().path();
    let o1 = tmp.path().join("o1.png");
    let o2 = tmp.path().join("o2.png");
    for o in [&o1, &o2] {
        ok(&bfr(&[
            "restore",
            "--input",
            s(&first),
            "--checkpoint",
            s(&ckpt),
            "--output",
            s(o),
        ]));
    }
    assert_eq!(fs::read(&o1).unwrap(), fs::read(&o2).unwrap());
    let img = load_image(&o1).unwrap();
    assert_eq!((img.height(), img.width()), (64, 64));

    let small = tmp.path().join("small.png");
    let src = load_image(&first).unwrap();
    save_image(
        &resize(&src, 16, 16, ResizeMethod::Bicubic).unwrap(),
        &small,
        ImageFormat::Png,
        None,
    )
    .unwrap();
    let o3 = tmp.path().join("o3.png");
    assert_eq!(
        bfr(&[
            "restore",
            "--input",
            s(&small),
            "--checkpoint",
            s(&ckpt),
            "--output",
            s(&o3)
        ])
        .status
        .code(),
        Some(3)
    );
    ok(&bfr(&[
        "restore",
        "--input",
        s(&small),
        "--checkpoint",
        s(&ckpt),
        "--output",
        s(&o3),
        "--upscale",
    ]));
    let up = load_image(&o3).unwrap();
    assert_eq!((up.height(), up.width()), (64, 64));

    let restored = tmp.path().join("restored");
    ok(&bfr(&[
        "restore",
        "--input",
        s(&lq),
        "--checkpoint",
        s(&ckpt),
        "--output",
        s(&restored),
    ]));
    assert_eq!(fs::read_dir(&restored).unwrap().count(), 4);

    let report = tmp.path().join("report");
    ok(&bfr(&[
        "evaluate",
        "--restored",
        s(&restored),
        "--reference",
        s(&data.join("hq")),
        "--out",
        s(&report),
    ]));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["counts"]["paired"], 4);
    assert!(json["aggregate"]["psnr"].is_number());
    let table = fs::read_to_string(report.join("metrics.txt")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Image", "PSNR", "SSIM", "LPIPS", "FID", "NIQE"]);
}

#[test]
fn evaluate_identity_and_no_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    faces(&imgs, 12, 64);
    let report = tmp.path().join("r1");
    ok(&bfr(&[
        "evaluate",
        "--restored",
        s(&imgs),
        "--reference",
        s(&imgs),
        "--out",
        s(&report),
    ]));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("metrics.json")).unwrap()).unwrap();
    for row in json["per_image"].as_array().unwrap() {
        assert_eq!(row["ssim"].as_f64(), Some(1.0));
    }

    let report = tmp.path().join("r2");
    ok(&bfr(&[
        "evaluate",
        "--restored",
        s(&imgs),
        "--pristine",
        s(&imgs),
        "--out",
        s(&report),
    ]));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("metrics.json")).unwrap()).unwrap();
    let agg = &json["aggregate"];
    assert!(agg["niqe"].is_number());
    for k in ["psnr", "ssim", "lpips", "fid"] {
        assert!(agg[k]["unavailable"].is_string(), "{k}");
    }
}
