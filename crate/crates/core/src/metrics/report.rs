//! Directory evaluation and report rendering.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{niqe_score, psnr, ssim, DeepScorer, MetricsConfig, NiqeModel};
use crate::degradation::list_images;
use crate::error::{invalid, Error, Result};
use crate::image::load_image;
use crate::metrics::frechet_distance;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub name: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
    pub niqe: Option<f64>,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Aggregate {
    Value(f64),
    Unavailable { unavailable: String },
}

impl Aggregate {
    fn unavailable(reason: &str) -> Self {
        Self::Unavailable {
            unavailable: reason.to_string(),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(*v),
            Self::Unavailable { .. } => None,
        }
    }

    fn mean_of(values: impl Iterator<Item = Option<f64>>, reason: &str) -> Self {
        let v: Vec<f64> = values.flatten().collect();
        if v.is_empty() {
            return Self::unavailable(reason);
        }
        Self::Value(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    pub lpips: Aggregate,
    pub fid: Aggregate,
    pub niqe: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub restored: usize,
    pub paired: usize,
    pub errors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageScores>,
    pub aggregate: Aggregates,
    pub counts: Counts,
    pub config: MetricsConfig,
}

const NO_REFERENCE: &str = "no reference directory";
const NO_DEEP: &str = "no deep feature extractor configured";
const NO_NIQE: &str = "no pristine model";
const NO_PAIRS: &str = "no scored images";

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

struct Scored {
    scores: ImageScores,
    embeddings: Option<(Vec<f64>, Vec<f64>)>,
}

fn score_one(
    path: &Path,
    reference: Option<&Path>,
    niqe: Option<&NiqeModel>,
    deep: Option<&DeepScorer>,
    cfg: &MetricsConfig,
) -> Scored {
    let mut s = ImageScores {
        name: file_name(path),
        ..ImageScores::default()
    };
    let mut embeddings = None;
    let img = match load_image(path) {
        Ok(img) => img,
        Err(e) => {
            s.errors.push(e.to_string());
            return Scored {
                scores: s,
                embeddings,
            };
        }
    };
    if let Some(model) = niqe {
        match niqe_score(&img, model) {
            Ok(v) => s.niqe = Some(v),
            Err(e) => s.errors.push(format!("niqe: {e}")),
        }
    }
    if let Some(dir) = reference {
        let ref_path = dir.join(&s.name);
        if !ref_path.is_file() {
            s.errors
                .push(format!("missing reference {}", ref_path.display()));
            return Scored {
                scores: s,
                embeddings,
            };
        }
        let full_ref = load_image(&ref_path).and_then(|r| {
            let p = psnr(&img, &r, 1.0, cfg.psnr_cap)?;
            let q = ssim(&img, &r, &cfg.ssim)?;
            Ok((r, p, q))
        });
        match full_ref {
            Ok((r, p, q)) => {
                s.psnr = Some(p);
                s.ssim = Some(q);
                if let Some(d) = deep {
                    match d
                        .distance(&img, &r)
                        .and_then(|l| Ok((l, d.embedding(&img)?, d.embedding(&r)?)))
                    {
                        Ok((l, ea, eb)) => {
                            s.lpips = Some(l);
                            embeddings = Some((ea, eb));
                        }
                        Err(e) => s.errors.push(format!("deep: {e}")),
                    }
                }
            }
            Err(e) => s.errors.push(e.to_string()),
        }
    }
    Scored {
        scores: s,
        embeddings,
    }
}

/// Scores every image in `restored`, pairing by file name with
/// `reference` when given. Unpaired files on either side become explicit
/// error entries.
pub fn evaluate_dirs(
    restored: &Path,
    reference: Option<&Path>,
    niqe: Option<&NiqeModel>,
    cfg: &MetricsConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    let files = list_images(restored)?;
    if files.is_empty() {
        return Err(invalid!("no images in {}", restored.display()));
    }
    let deep = cfg.deep.as_ref().map(DeepScorer::new).transpose()?;
    let scored: Vec<Scored> = files
        .par_iter()
        .map(|p| score_one(p, reference, niqe, deep.as_ref(), cfg))
        .collect();
    let mut per_image: Vec<ImageScores> = Vec::with_capacity(scored.len());
    let (mut emb_a, mut emb_b) = (Vec::new(), Vec::new());
    for s in scored {
        if let Some((a, b)) = s.embeddings {
            emb_a.push(a);
            emb_b.push(b);
        }
        per_image.push(s.scores);
    }
    if let Some(dir) = reference {
        let have: BTreeSet<String> = per_image.iter().map(|s| s.name.clone()).collect();
        for p in list_images(dir)? {
            let name = file_name(&p);
            if !have.contains(&name) {
                per_image.push(ImageScores {
                    name,
                    errors: vec!["no restored counterpart".into()],
                    ..ImageScores::default()
                });
            }
        }
        per_image.sort_by(|a, b| a.name.cmp(&b.name));
    }

    let full_ref = |get: fn(&ImageScores) -> Option<f64>| match reference {
        None => Aggregate::unavailable(NO_REFERENCE),
        Some(_) => Aggregate::mean_of(per_image.iter().map(get), NO_PAIRS),
    };
    let lpips = match (reference, &deep) {
        (None, _) => Aggregate::unavailable(NO_REFERENCE),
        (_, None) => Aggregate::unavailable(NO_DEEP),
        _ => Aggregate::mean_of(per_image.iter().map(|s| s.lpips), NO_PAIRS),
    };
    let fid = match (reference, &deep) {
        (None, _) => Aggregate::unavailable(NO_REFERENCE),
        (_, None) => Aggregate::unavailable(NO_DEEP),
        _ => match frechet_distance(&emb_a, &emb_b) {
            Ok(v) => Aggregate::Value(v),
            Err(e) => Aggregate::Unavailable {
                unavailable: e.to_string(),
            },
        },
    };
    let niqe_agg = match niqe {
        None => Aggregate::unavailable(NO_NIQE),
        Some(_) => Aggregate::mean_of(per_image.iter().map(|s| s.niqe), NO_PAIRS),
    };
    let aggregate = Aggregates {
        psnr: full_ref(|s| s.psnr),
        ssim: full_ref(|s| s.ssim),
        lpips,
        fid,
        niqe: niqe_agg,
    };
    let counts = Counts {
        restored: files.len(),
        paired: per_image.iter().filter(|s| s.psnr.is_some()).count(),
        errors: per_image.iter().filter(|s| !s.errors.is_empty()).count(),
    };
    Ok(MetricReport {
        per_image,
        aggregate,
        counts,
        config: cfg.clone(),
    })
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

fn agg_cell(a: &Aggregate, digits: usize) -> String {
    a.value()
        .map_or_else(|| "n/a".to_string(), |v| format!("{v:.digits$}"))
}

/// Aligned text table with one row per image and a final mean row.
pub fn render_table(report: &MetricReport) -> String {
    let header = ["Image", "PSNR", "SSIM", "LPIPS", "FID", "NIQE"]
        .map(String::from)
        .to_vec();
    let mut rows = vec![header];
    for s in &report.per_image {
        rows.push(vec![
            s.name.clone(),
            cell(s.psnr, 3),
            cell(s.ssim, 4),
            cell(s.lpips, 4),
            "-".into(),
            cell(s.niqe, 4),
        ]);
    }
    let a = &report.aggregate;
    rows.push(vec![
        "mean".into(),
        agg_cell(&a.psnr, 3),
        agg_cell(&a.ssim, 4),
        agg_cell(&a.lpips, 4),
        agg_cell(&a.fid, 4),
        agg_cell(&a.niqe, 4),
    ]);
    let widths: Vec<usize> = (0..6)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    let errors: Vec<&ImageScores> = report
        .per_image
        .iter()
        .filter(|s| !s.errors.is_empty())
        .collect();
    if !errors.is_empty() {
        out.push_str("\nerrors:\n");
        for s in errors {
            out.push_str(&format!("  {}: {}\n", s.name, s.errors.join("; ")));
        }
    }
    out
}

/// Writes `metrics.json` and `metrics.txt` into `out_dir`.
pub fn write_report(report: &MetricReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = out_dir.join("metrics.json");
    let txt = out_dir.join("metrics.txt");
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))?;
    fs::write(&txt, render_table(report)).map_err(|e| Error::io(&txt, e))?;
    Ok((json, txt))
}
