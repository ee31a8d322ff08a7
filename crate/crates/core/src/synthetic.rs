//! Procedural face-like images for tests and demos.
//!
//! Faces are roughly aligned: eyes and mouth fall inside the default
//! fallback region boxes, with seeded variation in shape, colour and
//! texture.

use std::f64::consts::PI;

use rand::Rng as _;

use crate::error::Result;
use crate::image::ImageTensor;
use crate::roi::Landmarks;
use crate::seed::rng_for;

#[derive(Clone, Debug)]
pub struct SyntheticFace {
    pub image: ImageTensor,
    pub landmarks: Landmarks,
}

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)
}

/// Smooth inside-indicator: 1 well inside, 0 outside, over about one pixel.
fn inside(d: f64, scale: f64) -> f64 {
    (((1.0 - d) * scale).clamp(-1.0, 1.0) + 1.0) / 2.0
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

pub fn synthetic_face(size: usize, seed: u64, index: usize) -> Result<SyntheticFace> {
    let mut rng = rng_for(seed, &format!("synthetic/face/{index}"));
    let s = size as f64;
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    let skin = [u(0.55, 0.9), u(0.4, 0.7), u(0.3, 0.55)];
    let hair = [u(0.05, 0.4), u(0.03, 0.3), u(0.02, 0.2)];
    let bg_a = [u(0.1, 0.9), u(0.1, 0.9), u(0.1, 0.9)];
    let bg_b = [u(0.1, 0.9), u(0.1, 0.9), u(0.1, 0.9)];
    let iris = [u(0.1, 0.5), u(0.15, 0.5), u(0.1, 0.6)];
    let lips = [u(0.6, 0.85), u(0.2, 0.4), u(0.25, 0.4)];
    let (fcx, fcy) = (0.5 * s + u(-0.02, 0.02) * s, 0.5 * s + u(-0.02, 0.02) * s);
    let (frx, fry) = (u(0.33, 0.38) * s, u(0.43, 0.48) * s);
    let eye_y = u(0.41, 0.44) * s;
    let eye_dx = u(0.19, 0.21) * s;
    let (erx, ery) = (u(0.06, 0.08) * s, u(0.025, 0.035) * s);
    let mouth_y = u(0.72, 0.76) * s;
    let (mrx, mry) = (u(0.1, 0.14) * s, u(0.025, 0.04) * s);
    let freq = [u(0.6, 1.4), u(0.6, 1.4), u(0.6, 1.4)];
    let phase = [u(0.0, 2.0 * PI), u(0.0, 2.0 * PI), u(0.0, 2.0 * PI)];
    let tex = u(0.02, 0.05);
    let hair_line = fcy - fry * u(0.45, 0.65);
    let sharp = s / 16.0;
    let (lex, rex) = (fcx - eye_dx, fcx + eye_dx);
    let image = ImageTensor::from_fn(size, size, 3, |yi, xi, c| {
        let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
        let mut px = mix(bg_a, bg_b, y / s);
        let face = inside(ellipse(x, y, fcx, fcy, frx, fry), sharp);
        let shade = 1.0 - 0.25 * ((x - fcx) / frx).powi(2);
        let skin_px = skin.map(|v| v * shade);
        px = mix(px, skin_px, face);
        let hair_mask = inside(
            ellipse(x, y, fcx, fcy - fry * 0.15, frx * 1.08, fry * 0.95),
            sharp,
        ) * (y < hair_line) as u8 as f64;
        px = mix(px, hair, hair_mask);
        for ex in [lex, rex] {
            let white = inside(ellipse(x, y, ex, eye_y, erx, ery), sharp);
            px = mix(px, [0.92, 0.92, 0.9], white);
            let ir = inside(ellipse(x, y, ex, eye_y, ery * 1.1, ery * 1.1), sharp) * white;
            px = mix(px, iris, ir);
            let pupil = inside(ellipse(x, y, ex, eye_y, ery * 0.5, ery * 0.5), sharp);
            px = mix(px, [0.02, 0.02, 0.02], pupil);
            let brow = inside(
                ellipse(x, y, ex, eye_y - ery * 2.6, erx * 1.1, ery * 0.45),
                sharp,
            );
            px = mix(px, hair, brow);
        }
        let nose = inside(
            ellipse(x, y, fcx, (eye_y + mouth_y) / 2.0, s * 0.025, s * 0.06),
            sharp,
        );
        px = mix(px, skin.map(|v| v * 0.8), nose * 0.6);
        let mouth = inside(ellipse(x, y, fcx, mouth_y, mrx, mry), sharp);
        px = mix(px, lips, mouth);
        let gap = inside(ellipse(x, y, fcx, mouth_y, mrx * 0.9, mry * 0.18), sharp);
        px = mix(px, [0.25, 0.05, 0.05], gap);
        let t = (x * freq[0] + phase[0]).sin() * (y * freq[1] + phase[1]).sin()
            + 0.5 * ((x + y) * freq[2] + phase[2]).sin();
        (px[c] + tex * t).clamp(0.0, 1.0) as f32
    })?;
    let mut points = vec![[fcx, fcy]; 68];
    for (k, i) in (0..17).enumerate() {
        let a = PI * (k as f64 / 16.0);
        points[i] = [fcx - frx * a.cos(), fcy + fry * 0.9 * a.sin()];
    }
    for (start, ex) in [(36, lex), (42, rex)] {
        for k in 0..6 {
            let a = 2.0 * PI * k as f64 / 6.0;
            points[start + k] = [ex + erx * a.cos(), eye_y + ery * a.sin()];
        }
    }
    for k in 0..20 {
        let a = 2.0 * PI * k as f64 / 20.0;
        let r = if k < 12 { 1.0 } else { 0.6 };
        points[48 + k] = [fcx + mrx * r * a.cos(), mouth_y + mry * r * a.sin()];
    }
    Ok(SyntheticFace {
        image,
        landmarks: Landmarks::new(points)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faces_are_seeded() {
        let a = synthetic_face(32, 1, 0).unwrap();
        let b = synthetic_face(32, 1, 0).unwrap();
        let c = synthetic_face(32, 1, 1).unwrap();
        assert_eq!(a.image, b.image);
        assert_ne!(a.image, c.image);
    }
}
