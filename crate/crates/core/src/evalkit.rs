//! Metrics: identity preservation with greedy matching, text-image
//! consistency through a toy joint embedder, and the expression coefficient
//! (consistency restricted to the emotion word).
//!
//! The joint embedder maps emotion words and rendered mouth/brow statistics
//! into one shared 8-dim space via fixed analytic features. It exists to
//! make expression metrics meaningful at this scale, not to approximate a
//! learned vision-language model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::FaceEmbedder;
use crate::error::{Error, Result};
use crate::imageio::load_rgb;
use crate::tensor::Tensor;
use crate::toyfaces::EmotionTable;

// ---------------------------------------------------------------------------
// Pluggable embedder seams
// ---------------------------------------------------------------------------

/// Face-embedding boundary for identity metrics.
pub trait FaceEmbed {
    fn embed_face(&self, face: &Tensor) -> Result<Tensor>;
}

impl FaceEmbed for FaceEmbedder {
    fn embed_face(&self, face: &Tensor) -> Result<Tensor> {
        self.embed(face)
    }
}

/// Joint text/image embedding boundary for consistency metrics.
pub trait JointEmbed {
    /// Whole-prompt embedding (uses the first known emotion word, if any).
    fn embed_text(&self, prompt: &str) -> Result<Tensor>;
    /// Single emotion word; unknown words are an error.
    fn embed_emotion_word(&self, word: &str) -> Result<Tensor>;
    fn embed_image(&self, image: &Tensor) -> Result<Tensor>;
}

pub const JOINT_EMBED_DIM: usize = 8;

/// Shared-space anchor so matching weak signals still score positively.
const ANCHOR: f64 = 1.0;

/// Analytic joint embedder over the face corpus conventions: emotion words
/// map through their (curvature, brow, openness) parameters; images map
/// through pixel-space estimates of the same three quantities.
#[derive(Debug, Clone)]
pub struct ToyJointEmbedder {
    emotions: EmotionTable,
}

impl ToyJointEmbedder {
    pub fn new(emotions: EmotionTable) -> Self {
        ToyJointEmbedder { emotions }
    }

    pub fn emotions(&self) -> &EmotionTable {
        &self.emotions
    }

    fn features_to_vec(&self, curve: f64, brow: f64, open: f64) -> Tensor {
        let mut v = vec![0.0; JOINT_EMBED_DIM];
        v[0] = curve;
        v[1] = brow;
        v[2] = 2.0 * open - 1.0;
        v[3] = ANCHOR;
        Tensor::new(vec![JOINT_EMBED_DIM], v).expect("fixed shape")
    }
}

impl JointEmbed for ToyJointEmbedder {
    fn embed_text(&self, prompt: &str) -> Result<Tensor> {
        for word in prompt.split_whitespace() {
            let w = word.to_lowercase();
            if self.emotions.contains(&w) {
                return self.embed_emotion_word(&w);
            }
        }
        // no emotion word: anchor only
        Ok(self.features_to_vec(0.0, 0.0, 0.5))
    }

    fn embed_emotion_word(&self, word: &str) -> Result<Tensor> {
        let p = self.emotions.get(&word.to_lowercase())?;
        Ok(self.features_to_vec(p.curve, p.brow, p.open))
    }

    fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        let (curve, brow, open) = estimate_expression(image)?;
        Ok(self.features_to_vec(curve, brow, open))
    }
}

// ---------------------------------------------------------------------------
// Pixel-space expression estimation
// ---------------------------------------------------------------------------

/// Estimate (mouth curvature, brow slope, mouth openness) from an image,
/// mirroring the renderer's conventions: mouth/brow pixels share the skin
/// chromaticity direction at ~0.55x brightness; the mouth sits below the
/// face's vertical center, brows above; the mouth's column-mean heights
/// follow a parabola whose leading coefficient encodes the curvature.
fn estimate_expression(image: &Tensor) -> Result<(f64, f64, f64)> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape {
            context: "expression estimate input",
            expected: vec![3, 0, 0],
            got: shape.to_vec(),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let gray = 1.0 / 3f64.sqrt();

    // Face pixels: bright enough and chromatically away from the gray axis.
    struct Px {
        x: usize,
        y: usize,
        b: f64,      // brightness (RGB norm)
        c: [f64; 3], // unit chromaticity
    }
    let mut face: Vec<Px> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let r = image.at3(0, y, x);
            let g = image.at3(1, y, x);
            let bl = image.at3(2, y, x);
            let b = (r * r + g * g + bl * bl).sqrt();
            if b < 0.05 {
                continue;
            }
            let c = [r / b, g / b, bl / b];
            let d2 = (c[0] - gray).powi(2) + (c[1] - gray).powi(2) + (c[2] - gray).powi(2);
            if d2 > 0.005 {
                face.push(Px { x, y, b, c });
            }
        }
    }
    if face.is_empty() {
        return Err(Error::DegenerateNorm(
            "no face-like pixels for expression estimation".into(),
        ));
    }

    // Dominant (skin) chromaticity direction, brightness-weighted.
    let mut dir = [0.0; 3];
    for p in &face {
        for k in 0..3 {
            dir[k] += p.b * p.c[k];
        }
    }
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if n < 1e-12 {
        return Err(Error::DegenerateNorm("degenerate chroma direction".into()));
    }
    for k in &mut dir {
        *k /= n;
    }

    // Skin-like pixels share that direction exactly (mouth/brow are parallel
    // to skin by construction); eye pixels sit far away.
    let skinlike: Vec<&Px> = face
        .iter()
        .filter(|p| {
            let d2 = (p.c[0] - dir[0]).powi(2) + (p.c[1] - dir[1]).powi(2) + (p.c[2] - dir[2]).powi(2);
            d2 < 0.02
        })
        .collect();
    if skinlike.is_empty() {
        return Ok((0.0, 0.0, 0.15));
    }
    let b_skin = skinlike.iter().map(|p| p.b).fold(0.0, f64::max);
    let dark: Vec<&&Px> = skinlike
        .iter()
        .filter(|p| {
            let r = p.b / b_skin;
            (0.40..0.70).contains(&r)
        })
        .collect();

    // Face mass center splits mouth (below) from brows (above).
    let cy: f64 = face.iter().map(|p| p.y as f64).sum::<f64>() / face.len() as f64;
    let cx: f64 = face.iter().map(|p| p.x as f64).sum::<f64>() / face.len() as f64;
    let mouth: Vec<&&&Px> = dark.iter().filter(|p| (p.y as f64) > cy).collect();
    let brows: Vec<&&&Px> = dark.iter().filter(|p| (p.y as f64) <= cy).collect();

    // Mouth: column-mean heights -> least-squares parabola; the renderer
    // draws y = center + 2.4*curve*(u^2 - 0.4) over u in [-1,1].
    let (curve, open) = if mouth.len() >= 3 {
        let mut cols: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for p in &mouth {
            let e = cols.entry(p.x).or_insert((0.0, 0));
            e.0 += p.y as f64;
            e.1 += 1;
        }
        let xs: Vec<f64> = cols.keys().map(|&x| x as f64).collect();
        let x_lo = xs[0];
        let x_hi = xs[xs.len() - 1];
        let half = ((x_hi - x_lo) / 2.0).max(1.0);
        let x_mid = (x_lo + x_hi) / 2.0;
        let pts: Vec<(f64, f64)> = cols
            .iter()
            .map(|(&x, &(sum_y, cnt))| ((x as f64 - x_mid) / half, sum_y / cnt as f64))
            .collect();
        let alpha = if pts.len() >= 3 { parabola_leading(&pts) } else { 0.0 };
        let mean_count =
            cols.values().map(|&(_, cnt)| cnt as f64).sum::<f64>() / cols.len() as f64;
        let curve = (alpha / 2.4).clamp(-1.3, 1.3);
        let open = ((mean_count - 2.0) / 2.2).clamp(0.0, 1.0);
        (curve, open)
    } else {
        (0.0, 0.15)
    };

    // Brows: per-side line slopes; the renderer draws slope -1.1*brow/bw on
    // the right side and +1.1*brow/bw on the left.
    let mut tilt = 0.0;
    let mut sides = 0.0;
    for left in [true, false] {
        let pts: Vec<(f64, f64)> = brows
            .iter()
            .filter(|p| ((p.x as f64) < cx) == left)
            .map(|p| (p.x as f64, p.y as f64))
            .collect();
        if pts.len() < 3 {
            continue;
        }
        let x_lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let x_hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let bw = ((x_hi - x_lo) / 2.0).max(1.0);
        let slope = line_slope(&pts);
        let sign = if left { 1.0 } else { -1.0 };
        tilt += sign * slope * bw / 1.1;
        sides += 1.0;
    }
    let brow = if sides > 0.0 { (tilt / sides).clamp(-1.3, 1.3) } else { 0.0 };

    Ok((curve, brow, open))
}

/// Leading coefficient of the least-squares parabola through (u, y) points.
fn parabola_leading(pts: &[(f64, f64)]) -> f64 {
    // normal equations for y = a u^2 + b u + c
    let n = pts.len() as f64;
    let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
    let (mut sy, mut sxy, mut sx2y) = (0.0, 0.0, 0.0);
    for &(u, y) in pts {
        let u2 = u * u;
        s1 += u;
        s2 += u2;
        s3 += u2 * u;
        s4 += u2 * u2;
        sy += y;
        sxy += u * y;
        sx2y += u2 * y;
    }
    // | s4 s3 s2 | a   sx2y
    // | s3 s2 s1 | b = sxy
    // | s2 s1 n  | c   sy
    let det = |m: [[f64; 3]; 3]| -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det([[s4, s3, s2], [s3, s2, s1], [s2, s1, n]]);
    if d.abs() < 1e-9 {
        return 0.0;
    }
    det([[sx2y, s3, s2], [sxy, s2, s1], [sy, s1, n]]) / d
}

/// Least-squares slope of y on x.
fn line_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, y) in pts {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den < 1e-9 {
        0.0
    } else {
        num / den
    }
}

// ---------------------------------------------------------------------------
// Attention diagnostics
// ---------------------------------------------------------------------------

/// Extract one token's spatial attention map as [h, w] from a captured
/// layer value of shape [h*w, n_tokens].
pub fn token_attention_map(map: &Tensor, h: usize, w: usize, token: usize) -> Result<Tensor> {
    let shape = map.shape();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::Shape {
            context: "token attention map",
            expected: vec![h * w, 0],
            got: shape.to_vec(),
        });
    }
    if token >= shape[1] {
        return Err(Error::invalid(format!(
            "token index {token} out of range for {} attention columns",
            shape[1]
        )));
    }
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            out.set2(y, x, map.at2(y * w + x, token));
        }
    }
    Ok(out)
}

/// Mean attention per position inside the face mask divided by the mean per
/// position outside it, after resampling the mask to the map's resolution.
/// A tiny stabilizer keeps the ratio finite when one side carries no mass;
/// it is negligible against typical per-position attention (~1/positions).
pub fn attention_mass_ratio(map_hw: &Tensor, mask: &crate::losses::FaceMask) -> Result<f64> {
    let shape = map_hw.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            context: "attention mass ratio map",
            expected: vec![0, 0],
            got: shape.to_vec(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let m = mask.at_resolution(h, w)?;
    let mut in_mass = 0.0;
    let mut out_mass = 0.0;
    let mut in_area = 0.0;
    let mut out_area = 0.0;
    for y in 0..h {
        for x in 0..w {
            let a = map_hw.at2(y, x);
            let mv = m.at2(y, x);
            in_mass += a * mv;
            out_mass += a * (1.0 - mv);
            in_area += mv;
            out_area += 1.0 - mv;
        }
    }
    if in_area < 1e-9 || out_area < 1e-9 {
        return Err(Error::invalid(
            "attention ratio needs mask area on both sides",
        ));
    }
    const EPS: f64 = 1e-12;
    Ok(((in_mass / in_area) + EPS) / ((out_mass / out_area) + EPS))
}

// ---------------------------------------------------------------------------
// Greedy matching
// ---------------------------------------------------------------------------

/// Repeatedly take the global maximum of the similarity matrix, record it,
/// and delete its row and column; ties break toward the lowest row index,
/// then the lowest column index. Returns (row, col, similarity) triples.
pub fn greedy_match(sim: &Tensor) -> Result<Vec<(usize, usize, f64)>> {
    let shape = sim.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::invalid("similarity matrix must be 2-D and nonempty"));
    }
    let (r, c) = (shape[0], shape[1]);
    let k = r.min(c);
    let mut used_r = vec![false; r];
    let mut used_c = vec![false; c];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..r {
            if used_r[i] {
                continue;
            }
            for j in 0..c {
                if used_c[j] {
                    continue;
                }
                let v = sim.at2(i, j);
                // strict > keeps the first (lowest row, then column) on ties
                if best.map_or(true, |(_, _, bv)| v > bv) {
                    best = Some((i, j, v));
                }
            }
        }
        let (i, j, v) = best.expect("k <= min(r,c) leaves a free cell");
        used_r[i] = true;
        used_c[j] = true;
        out.push((i, j, v));
    }
    Ok(out)
}

/// Mean of the greedily matched similarities.
pub fn greedy_match_score(sim: &Tensor) -> Result<f64> {
    let pairs = greedy_match(sim)?;
    Ok(pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64)
}

/// Identity preservation: embed both crop lists, build the pairwise cosine
/// matrix, and return the greedy matching score. Extra unmatched entries on
/// the longer side are ignored.
pub fn identity_preservation(
    generated: &[Tensor],
    references: &[Tensor],
    embedder: &dyn FaceEmbed,
) -> Result<f64> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::invalid("identity preservation needs nonempty crop lists"));
    }
    let gen_emb: Vec<Tensor> = generated
        .iter()
        .map(|t| embedder.embed_face(t))
        .collect::<Result<_>>()?;
    let ref_emb: Vec<Tensor> = references
        .iter()
        .map(|t| embedder.embed_face(t))
        .collect::<Result<_>>()?;
    let mut sim = Tensor::zeros(&[gen_emb.len(), ref_emb.len()]);
    for (i, g) in gen_emb.iter().enumerate() {
        for (j, r) in ref_emb.iter().enumerate() {
            sim.set2(i, j, g.cosine(r)?.clamp(-1.0, 1.0));
        }
    }
    greedy_match_score(&sim)
}

/// Cosine similarity between the prompt's and the image's joint embeddings.
pub fn text_image_consistency(
    prompt: &str,
    image: &Tensor,
    joint: &dyn JointEmbed,
) -> Result<f64> {
    let t = joint.embed_text(prompt)?;
    let i = joint.embed_image(image)?;
    Ok(t.cosine(&i)?.clamp(-1.0, 1.0))
}

/// Text-image consistency restricted to a single emotion word.
pub fn expression_coefficient(
    emotion_word: &str,
    image: &Tensor,
    joint: &dyn JointEmbed,
) -> Result<f64> {
    let t = joint.embed_emotion_word(emotion_word)?;
    let i = joint.embed_image(image)?;
    Ok(t.cosine(&i)?.clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Directory-level evaluation
// ---------------------------------------------------------------------------

/// One evaluation request row in prompts.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRow {
    /// Generated image path, relative to the evaluation root.
    pub image: String,
    pub prompt: String,
    /// Reference face crop path for identity scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    /// Emotion word for expression scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub image: String,
    pub id_pres: Option<f64>,
    pub clip_ti: f64,
    pub expression_coeff: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-row identity preservation (rows with a reference).
    pub id_pres: Option<f64>,
    /// Mean per-row text-image consistency.
    pub clip_ti: f64,
    /// Mean per-row expression coefficient (rows with an emotion).
    pub expression_coeff: Option<f64>,
    pub rows: Vec<EvalRow>,
    /// Echo of what was evaluated.
    pub root: String,
    pub n_rows: usize,
}

/// Evaluate a directory holding {generated images, reference crops,
/// prompts.jsonl}. Writes `report.json` and `rows.csv` next to the inputs
/// and returns the report.
pub fn evaluate(root: &Path) -> Result<EvalReport> {
    let prompts_path = root.join("prompts.jsonl");
    let text = fs::read_to_string(&prompts_path)?;
    let mut rows = Vec::new();
    let face_embedder = FaceEmbedder;
    let joint = ToyJointEmbedder::new(EmotionTable::default_table());

    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let req: PromptRow = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("prompts.jsonl line {}: {e}", lineno + 1)))?;
        let image = load_rgb(&root.join(&req.image))?;
        let id_pres = match &req.reference {
            None => None,
            Some(rel) => {
                let reference = load_rgb(&root.join(rel))?;
                Some(identity_preservation(
                    std::slice::from_ref(&image),
                    std::slice::from_ref(&reference),
                    &face_embedder,
                )?)
            }
        };
        let clip_ti = text_image_consistency(&req.prompt, &image, &joint)?;
        let expression = match &req.emotion {
            None => None,
            Some(w) => Some(expression_coefficient(w, &image, &joint)?),
        };
        rows.push(EvalRow {
            image: req.image,
            id_pres,
            clip_ti,
            expression_coeff: expression,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("prompts.jsonl holds no evaluation rows".into()));
    }

    let mean_of = |vals: Vec<f64>| -> Option<f64> {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let report = EvalReport {
        id_pres: mean_of(rows.iter().filter_map(|r| r.id_pres).collect()),
        clip_ti: rows.iter().map(|r| r.clip_ti).sum::<f64>() / rows.len() as f64,
        expression_coeff: mean_of(rows.iter().filter_map(|r| r.expression_coeff).collect()),
        n_rows: rows.len(),
        root: root.display().to_string(),
        rows,
    };

    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(root.join("report.json"), json)?;

    let mut csv = String::from("image,id_pres,clip_ti,expression_coeff\n");
    for r in &report.rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{:.6},{}\n",
            r.image,
            opt(r.id_pres),
            r.clip_ti,
            opt(r.expression_coeff)
        ));
    }
    fs::write(root.join("rows.csv"), csv)?;
    Ok(report)
}
