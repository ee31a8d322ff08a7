//! Facial regions for the local discriminators.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::Path;

use bfr_autograd::{Float, SparseRows, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::discriminator::Region;
use crate::error::{invalid, Error, Result};
use crate::image::{resize_taps, ImageTensor, ResizeMethod};

pub const LANDMARK_COUNT: usize = 68;

/// Pixel box `(x, y, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// 68-point facial landmarks in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks(Vec<[f64; 2]>);

impl Landmarks {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(invalid!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                points.len()
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid!("landmarks must be finite"));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.0
    }
}

/// Landmark indices bounding each region.
pub fn region_points(region: Region) -> std::ops::Range<usize> {
    match region {
        Region::LeftEye => 36..42,
        Region::RightEye => 42..48,
        Region::Mouth => 48..68,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    /// Side of the square crops fed to the local discriminators.
    pub roi_size: usize,
    /// Padding on each side of a landmark box, as a fraction of its size.
    pub margin: f64,
    /// Fallback boxes `(x, y, w, h)` as fractions of the image size.
    pub left_eye: [f64; 4],
    pub right_eye: [f64; 4],
    pub mouth: [f64; 4],
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            roi_size: 64,
            margin: 0.15,
            left_eye: [0.20, 0.35, 0.22, 0.15],
            right_eye: [0.58, 0.35, 0.22, 0.15],
            mouth: [0.30, 0.65, 0.40, 0.18],
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.roi_size == 0 || !(self.margin >= 0.0) {
            return Err(Error::Config(
                "roi_size must be positive and margin nonnegative".into(),
            ));
        }
        for f in [self.left_eye, self.right_eye, self.mouth] {
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) || f[2] <= 0.0 || f[3] <= 0.0 {
                return Err(Error::Config(format!(
                    "fallback box {f:?} must use fractions in [0, 1] with positive size"
                )));
            }
        }
        Ok(())
    }

    fn fractions(&self, region: Region) -> [f64; 4] {
        match region {
            Region::LeftEye => self.left_eye,
            Region::RightEye => self.right_eye,
            Region::Mouth => self.mouth,
        }
    }

    /// Box of `region` in an `h × w` image, from landmarks when given and
    /// from the fallback fractions otherwise; always clamped into the image.
    pub fn region_box(
        &self,
        region: Region,
        h: usize,
        w: usize,
        landmarks: Option<&Landmarks>,
    ) -> Result<RoiBox> {
        let (x0, y0, x1, y1) = match landmarks {
            Some(lm) => {
                let pts = &lm.points()[region_points(region)];
                let (mut lx, mut ly, mut hx, mut hy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
                for p in pts {
                    lx = lx.min(p[0]);
                    ly = ly.min(p[1]);
                    hx = hx.max(p[0]);
                    hy = hy.max(p[1]);
                }
                let (mx, my) = (self.margin * (hx - lx), self.margin * (hy - ly));
                (
                    (lx - mx).floor(),
                    (ly - my).floor(),
                    (hx + mx).ceil(),
                    (hy + my).ceil(),
                )
            }
            None => {
                let [fx, fy, fw, fh] = self.fractions(region);
                let (x, y) = ((fx * w as f64).round(), (fy * h as f64).round());
                (
                    x,
                    y,
                    x + (fw * w as f64).round(),
                    y + (fh * h as f64).round(),
                )
            }
        };
        let cx = |v: f64| v.clamp(0.0, w as f64) as usize;
        let cy = |v: f64| v.clamp(0.0, h as f64) as usize;
        let (x0, x1, y0, y1) = (cx(x0), cx(x1), cy(y0), cy(y1));
        if x1 <= x0 || y1 <= y0 {
            return Err(invalid!(
                "{} box is empty after clamping to {h}x{w}",
                region.name()
            ));
        }
        Ok(RoiBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn boxes(
        &self,
        h: usize,
        w: usize,
        landmarks: Option<&Landmarks>,
    ) -> Result<BTreeMap<&'static str, RoiBox>> {
        Region::ALL
            .iter()
            .map(|&r| Ok((r.name(), self.region_box(r, h, w, landmarks)?)))
            .collect()
    }
}

/// Bicubic taps mapping a box onto a `size × size` crop.
pub fn crop_taps(b: RoiBox, size: usize) -> (SparseRows, SparseRows) {
    let shift = |rows: SparseRows, off: usize| -> SparseRows {
        rows.into_iter()
            .map(|taps| taps.into_iter().map(|(i, w)| (i + off, w)).collect())
            .collect()
    };
    (
        shift(resize_taps(b.h, size, ResizeMethod::Bicubic), b.y),
        shift(resize_taps(b.w, size, ResizeMethod::Bicubic), b.x),
    )
}

/// Differentiable crops of a batch `[N, 3, H, W]`, one box per item.
pub fn crop_batch<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    boxes: &[RoiBox],
    size: usize,
) -> Result<Var> {
    let maps = boxes.iter().map(|&b| crop_taps(b, size)).collect();
    Ok(tape.resample(x, maps)?)
}

/// Boxes and `roi_size` crops of every region.
#[derive(Clone, Debug)]
pub struct RoiSet {
    pub boxes: BTreeMap<&'static str, RoiBox>,
    pub crops: BTreeMap<&'static str, ImageTensor>,
}

pub fn extract_rois(
    img: &ImageTensor,
    landmarks: Option<&Landmarks>,
    config: &RoiConfig,
) -> Result<RoiSet> {
    config.validate()?;
    let boxes = config.boxes(img.height(), img.width(), landmarks)?;
    let mut crops = BTreeMap::new();
    for (&name, &b) in &boxes {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(img.to_tensor());
        let c = crop_batch(&mut tape, x, &[b], config.roi_size)?;
        crops.insert(name, ImageTensor::from_tensor(tape.value(c), 0)?);
    }
    Ok(RoiSet { boxes, crops })
}

#[derive(Deserialize)]
struct LandmarkRecord {
    image: String,
    points: Vec<[f64; 2]>,
}

/// Reads a JSON-lines landmark file: `{"image": name, "points": [[x, y], …]}`.
pub fn load_landmarks(path: &Path) -> Result<HashMap<String, Landmarks>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let rec: LandmarkRecord = serde_json::from_str(line)?;
        let lm = Landmarks::new(rec.points)
            .map_err(|e| invalid!("{}:{}: {e}", path.display(), i + 1))?;
        out.insert(rec.image, lm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fallback_box_on_512() {
        let cfg = RoiConfig::default();
        let b = cfg.region_box(Region::LeftEye, 512, 512, None).unwrap();
        assert_eq!(
            b,
            RoiBox {
                x: 102,
                y: 179,
                w: 113,
                h: 77
            }
        );
    }

    #[test]
    fn landmark_box_is_padded_bounds() {
        let mut pts = vec![[10.0, 10.0]; 68];
        for (k, i) in (36..42).enumerate() {
            pts[i] = [20.0 + 4.0 * k as f64, 30.0 + (k % 2) as f64 * 10.0];
        }
        let lm = Landmarks::new(pts).unwrap();
        let cfg = RoiConfig {
            margin: 0.1,
            ..Default::default()
        };
        // x in [20, 40], y in [30, 40]; margins 2 and 1.
        let b = cfg.region_box(Region::LeftEye, 64, 64, Some(&lm)).unwrap();
        assert_eq!(
            b,
            RoiBox {
                x: 18,
                y: 29,
                w: 24,
                h: 12
            }
        );
        assert!(Landmarks::new(vec![[0.0, 0.0]; 67]).is_err());
    }

    #[test]
    fn crops_have_roi_size() {
        let img = ImageTensor::from_fn(40, 30, 3, |y, x, _| ((x + y) % 7) as f32 / 7.0).unwrap();
        let set = extract_rois(
            &img,
            None,
            &RoiConfig {
                roi_size: 16,
                ..Default::default()
            },
        )
        .unwrap();
        for c in set.crops.values() {
            assert_eq!((c.height(), c.width(), c.channels()), (16, 16, 3));
        }
    }
}
