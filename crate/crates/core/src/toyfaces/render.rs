//! The parametric renderer. Faces are hard-edged pixel classes on a gray
//! background:
//!
//! * background: exact grayscale (r=g=b), brightness varies per column;
//! * skin: flat color snapped to channel levels that are multiples of 20;
//! * mouth and brows: exactly 11/20 of the skin levels per channel;
//! * eyes: complementary-hue color.
//!
//! The 20 -> 11 snap makes mouth/brow pixels exactly parallel to skin in
//! integer RGB, so 8-bit quantization preserves equal chromaticity direction.
//! Expression changes swap pixels between the skin and mouth/brow classes
//! only; every per-pixel statistic the analytic face embedder computes is
//! identical for those two classes, which makes identity embeddings exactly
//! expression-invariant.

use rand::Rng;

use super::{EmotionTable, FaceSpec};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

pub struct RenderOutput {
    /// [3,S,S], values on the k/255 grid
    pub image: Tensor,
    /// [S,S], exactly 0 or 1
    pub mask: Tensor,
    /// Half-open [x0, y0, x1, y1]
    pub bbox: [usize; 4],
}

/// Fraction of the image side taken by the face radius at eccentricity 0.
const FACE_RADIUS_FRAC: f64 = 0.34;

pub fn render_face(
    spec: &FaceSpec,
    seed: u64,
    size: usize,
    emotions: &EmotionTable,
) -> Result<RenderOutput> {
    spec.validate(emotions)?;
    if size < 16 {
        return Err(Error::invalid(format!("image size {size} below minimum 16")));
    }
    let s = size;
    let expr = emotions.get(&spec.expression)?;

    // Per-render draws: center jitter and background gradient direction.
    let mut rng = substream(seed, "render", 0, 0);
    let jx = rng.random_range(-1i64..=1) as f64;
    let jy = rng.random_range(-1i64..=1) as f64;
    let grad_dir = if rng.random::<bool>() { 1.0 } else { -1.0 };

    // Colors. Skin levels are multiples of 20; mouth/brow exactly 11/20 of skin.
    let (skin, mouth, eye) = face_palette(spec.identity.hue);

    // Geometry. The center keeps fractional part 0.5 with integer jitter, so
    // rasterization is translation-exact across renders of one identity.
    let r0 = FACE_RADIUS_FRAC * s as f64;
    let k = 1.0 + 0.30 * spec.identity.ecc;
    let (a, b) = (r0 / k, r0 * k);
    let cx = (s as f64 - 1.0) / 2.0 + jx;
    let cy = (s as f64 - 1.0) / 2.0 + jy;

    let d_eye = a * (0.30 + 0.32 * spec.identity.eyespan);
    let ey = cy - 0.35 * b;
    let re = (0.16 * a).max(1.25);

    let mut levels = vec![0u8; 3 * s * s];
    let mut mask = Tensor::zeros(&[s, s]);

    // Background: exact gray with a horizontal brightness ramp.
    let base = 150 + 12 * (spec.background_id % 8) as i32;
    for x in 0..s {
        let ramp = (8.0 * (2.0 * x as f64 / (s as f64 - 1.0) - 1.0)).round();
        let level = (base + (grad_dir * ramp) as i32).clamp(16, 245) as u8;
        for y in 0..s {
            for c in 0..3 {
                levels[(c * s + y) * s + x] = level;
            }
        }
    }

    let inside = |x: f64, y: f64| -> bool {
        let dx = (x - cx) / a;
        let dy = (y - cy) / b;
        dx * dx + dy * dy <= 1.0
    };
    let put = |levels: &mut Vec<u8>, x: i64, y: i64, color: &[u8; 3]| {
        if x < 0 || y < 0 || x >= s as i64 || y >= s as i64 {
            return;
        }
        if !inside(x as f64, y as f64) {
            return;
        }
        for c in 0..3 {
            levels[(c * s + y as usize) * s + x as usize] = color[c];
        }
    };

    // Skin fill + mask.
    for y in 0..s {
        for x in 0..s {
            if inside(x as f64, y as f64) {
                mask.set2(y, x, 1.0);
                for c in 0..3 {
                    levels[(c * s + y) * s + x] = skin[c];
                }
            }
        }
    }

    // Brows: one-pixel-thick mirrored segments; slope follows the brow
    // parameter, positive brow also lifts them.
    let bw = (0.30 * a).round().max(2.0);
    let brow_y = ey - (0.16 * b + 1.2 * expr.brow.max(0.0)) - 1.0;
    for side in [-1.0, 1.0] {
        let bx = cx + side * d_eye;
        let mut t = -bw;
        while t <= bw {
            let x = (bx + t).round() as i64;
            let y = (brow_y - expr.brow * 1.1 * (side * t) / bw).round() as i64;
            put(&mut levels, x, y, &mouth);
            t += 1.0;
        }
    }

    // Mouth: parabolic band, curvature and thickness from the expression.
    let mw = 0.45 * a;
    let my = cy + 0.45 * b;
    let th = 1.0 + 2.2 * expr.open;
    let x_lo = (cx - mw).round() as i64;
    let x_hi = (cx + mw).round() as i64;
    for x in x_lo..=x_hi {
        let dxn = (x as f64 - cx) / mw;
        let yc = my + expr.curve * 2.4 * (dxn * dxn - 0.4);
        let y_lo = (yc - th / 2.0).round() as i64;
        let y_hi = (yc + th / 2.0).round() as i64;
        for y in y_lo..=y_hi {
            put(&mut levels, x, y, &mouth);
        }
    }

    // Eyes last so nothing overdraws them; their geometry never depends on
    // the expression.
    for side in [-1.0, 1.0] {
        let ex = cx + side * d_eye;
        let lo_x = (ex - re).floor() as i64;
        let hi_x = (ex + re).ceil() as i64;
        let lo_y = (ey - re).floor() as i64;
        let hi_y = (ey + re).ceil() as i64;
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let dx = x as f64 - ex;
                let dy = y as f64 - ey;
                if dx * dx + dy * dy <= re * re {
                    put(&mut levels, x, y, &eye);
                }
            }
        }
    }

    // Tight half-open bbox around the mask.
    let mut bbox = [s, s, 0, 0];
    for y in 0..s {
        for x in 0..s {
            if mask.at2(y, x) >= 0.5 {
                bbox[0] = bbox[0].min(x);
                bbox[1] = bbox[1].min(y);
                bbox[2] = bbox[2].max(x + 1);
                bbox[3] = bbox[3].max(y + 1);
            }
        }
    }

    let image = Tensor::new(
        vec![3, s, s],
        levels.iter().map(|&l| l as f64 / 255.0).collect(),
    )?;
    Ok(RenderOutput { image, mask, bbox })
}

/// The exact quantized colors a face with this hue is built from:
/// (skin, mouth/brow, eye). Exposed so the face-embedder tests can verify
/// its gate thresholds against the true palette over the whole hue range.
pub fn face_palette(hue: f64) -> ([u8; 3], [u8; 3], [u8; 3]) {
    let skin = hsv_to_levels(hue, 0.50, 0.90, 20);
    let mouth = [skin[0] / 20 * 11, skin[1] / 20 * 11, skin[2] / 20 * 11];
    let eye = hsv_to_levels((hue + 0.5).fract(), 0.55, 0.62, 5);
    (skin, mouth, eye)
}

/// HSV to RGB with channel levels snapped to multiples of `step`.
fn hsv_to_levels(h: f64, sat: f64, val: f64, step: u8) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = val * (1.0 - sat);
    let q = val * (1.0 - f * sat);
    let t = val * (1.0 - (1.0 - f) * sat);
    let (r, g, b) = match i {
        0 => (val, t, p),
        1 => (q, val, p),
        2 => (p, val, t),
        3 => (p, q, val),
        4 => (t, p, val),
        _ => (val, p, q),
    };
    let snap = |v: f64| -> u8 {
        let level = (v * 255.0 / step as f64).round() * step as f64;
        level.clamp(0.0, 255.0) as u8
    };
    [snap(r), snap(g), snap(b)]
}

pub fn template_count() -> usize {
    5
}

/// Caption templates. Templates 3 and 4 are neutral: identity token only,
/// no emotion word.
pub fn make_caption(spec: &FaceSpec, template_id: usize) -> Result<String> {
    let g = &spec.gender;
    let e = &spec.expression;
    Ok(match template_id {
        0 => format!("a {e} {g} in front of a plain background"),
        1 => format!("a photo of a {e} {g}"),
        2 => format!("portrait of a {e} {g}"),
        3 => format!("a {g} in front of a plain background"),
        4 => format!("a photo of a {g}"),
        other => {
            return Err(Error::invalid(format!(
                "template_id {other} outside 0..{}",
                template_count()
            )))
        }
    })
}
