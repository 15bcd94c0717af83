//! Conditioning: tokenizer + frozen text encoder, the chromaticity-statistics
//! face embedder, and the trainable augmentation head that rewrites the
//! identity-token row of the text embedding from a reference face.
//!
//! The text encoder and face embedder hold no trainable state: their tables
//! and thresholds are fixed, so captions and reference faces map to the same
//! vectors before, during, and after training. The only trainable piece here
//! is the augmentation head MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat1, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal_init, Bound, ParamSet};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::toyfaces::{EmotionTable, GENDER_TOKENS};

/// Fixed context length: every caption is padded (never truncated) to this
/// many token rows.
pub const MAX_TOKENS: usize = 16;

/// Width of the face embedding φ(f).
pub const FACE_EMBED_DIM: usize = 8;

/// Root seed for every frozen (non-trainable) conditioning table.
const FROZEN_SEED: u64 = 0x7465_7874;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;

    const BASE: [&'static str; 10] = [
        "<pad>",
        "<unk>",
        "a",
        "in",
        "front",
        "of",
        "plain",
        "background",
        "photo",
        "portrait",
    ];

    /// Base words + identity tokens + the given emotion words.
    pub fn for_emotions(emotions: &[String]) -> Result<Self> {
        let mut words: Vec<String> = Self::BASE.iter().map(|s| s.to_string()).collect();
        words.extend(GENDER_TOKENS.iter().map(|s| s.to_string()));
        for e in emotions {
            let e = e.to_lowercase();
            if words.contains(&e) {
                return Err(Error::Vocab(format!(
                    "emotion word {e:?} collides with an existing vocabulary word"
                )));
            }
            words.push(e);
        }
        Ok(Vocab { words })
    }

    /// Known word -> its id; anything else -> the reserved unknown id.
    pub fn id_of(&self, word: &str) -> usize {
        self.words
            .iter()
            .position(|w| w == word)
            .unwrap_or(Self::UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Plain-text listing, one "word id" per line, in id order.
    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let mut text = String::new();
        for (id, w) in self.words.iter().enumerate() {
            text.push_str(&format!("{w} {id}\n"));
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(word), Some(id)) = (it.next(), it.next()) else {
                return Err(Error::Vocab(format!("malformed line {}", lineno + 1)));
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::Vocab(format!("bad id on line {}", lineno + 1)))?;
            pairs.push((id, word.to_string()));
        }
        pairs.sort_by_key(|(id, _)| *id);
        for (want, (id, _)) in pairs.iter().enumerate() {
            if *id != want {
                return Err(Error::Vocab(format!("ids not contiguous: missing {want}")));
            }
        }
        if pairs.len() < 2 {
            return Err(Error::Vocab("vocabulary too small".into()));
        }
        Ok(Vocab {
            words: pairs.into_iter().map(|(_, w)| w).collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    /// Exactly MAX_TOKENS ids, padded with the pad id.
    pub ids: Vec<usize>,
    /// The real (lowercased) words, before padding.
    pub words: Vec<String>,
}

impl Tokens {
    pub fn n_real(&self) -> usize {
        self.words.len()
    }
}

/// Lowercase + whitespace split + id lookup + pad. Errors on an empty prompt
/// or one longer than the context.
pub fn encode_text(text: &str, vocab: &Vocab) -> Result<Tokens> {
    let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if words.is_empty() {
        return Err(Error::invalid("prompt has no tokens"));
    }
    if words.len() > MAX_TOKENS {
        return Err(Error::invalid(format!(
            "prompt has {} tokens, maximum is {MAX_TOKENS}",
            words.len()
        )));
    }
    let mut ids = vec![Vocab::PAD; MAX_TOKENS];
    for (i, w) in words.iter().enumerate() {
        ids[i] = vocab.id_of(w);
    }
    Ok(Tokens { ids, words })
}

/// Position of the first identity token (a gender word), if any.
pub fn locate_identity_token(tokens: &Tokens) -> Option<usize> {
    tokens
        .words
        .iter()
        .position(|w| GENDER_TOKENS.contains(&w.as_str()))
}

/// Position of the first emotion word, if any.
pub fn locate_emotion_token(tokens: &Tokens, emotions: &EmotionTable) -> Option<usize> {
    tokens.words.iter().position(|w| emotions.contains(w))
}

// ---------------------------------------------------------------------------
// Conditioning dropout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondBranch {
    /// Null conditioning; trains the unconditional prior.
    Uncond,
    /// Caption only, identity row left as plain text embedding.
    TextOnly,
    /// Caption with the identity row rewritten from the reference face.
    Full,
}

impl CondBranch {
    pub fn label(self) -> &'static str {
        match self {
            CondBranch::Uncond => "uncond",
            CondBranch::TextOnly => "text_only",
            CondBranch::Full => "full",
        }
    }
}

/// Per-sample branch from one uniform draw: 10% unconditional, next 10%
/// text-only, the rest full conditioning.
pub fn draw_branch(u: f64) -> CondBranch {
    if u < 0.10 {
        CondBranch::Uncond
    } else if u < 0.20 {
        CondBranch::TextOnly
    } else {
        CondBranch::Full
    }
}

// ---------------------------------------------------------------------------
// Frozen text encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TextEncoder {
    d: usize,
    /// One frozen vector per vocabulary id, keyed off the word string so a
    /// given word always embeds identically regardless of vocabulary layout.
    table: Vec<Tensor>,
    /// Sinusoidal position rows, [MAX_TOKENS, d].
    pos: Tensor,
    /// Null conditioning: one frozen vector broadcast to all rows, [MAX_TOKENS, d].
    null_rows: Tensor,
}

fn frozen_word_vector(word: &str, d: usize) -> Tensor {
    let mut rng = substream(FROZEN_SEED, word, d as u64, 0);
    crate::rng::normal_tensor(&mut rng, &[d])
}

impl TextEncoder {
    pub fn new(vocab: &Vocab, d: usize) -> Self {
        let table = (0..vocab.len())
            .map(|id| frozen_word_vector(vocab.word(id), d))
            .collect();

        let mut pos = Tensor::zeros(&[MAX_TOKENS, d]);
        for i in 0..MAX_TOKENS {
            for j in 0..d {
                let freq = 10000f64.powf(-2.0 * (j / 2) as f64 / d as f64);
                let angle = i as f64 * freq;
                let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                pos.set2(i, j, v);
            }
        }

        let null_vec = frozen_word_vector("<null>", d);
        let mut null_rows = Tensor::zeros(&[MAX_TOKENS, d]);
        for i in 0..MAX_TOKENS {
            for j in 0..d {
                null_rows.set2(i, j, null_vec.data()[j]);
            }
        }

        TextEncoder { d, table, pos, null_rows }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Token rows: word vector + position vector, [MAX_TOKENS, d]. Row i
    /// depends only on the id at position i, so single-word prompt edits
    /// touch exactly one row.
    pub fn encode(&self, tokens: &Tokens) -> Tensor {
        let mut out = Tensor::zeros(&[MAX_TOKENS, self.d]);
        for i in 0..MAX_TOKENS {
            let row = &self.table[tokens.ids[i]];
            for j in 0..self.d {
                out.set2(i, j, row.data()[j] + self.pos.at2(i, j));
            }
        }
        out
    }

    pub fn null_conditioning(&self) -> &Tensor {
        &self.null_rows
    }
}

// ---------------------------------------------------------------------------
// Face embedder
// ---------------------------------------------------------------------------

/// Differentiable chromaticity-statistics embedder.
///
/// Per pixel it computes the unit RGB direction c, gates face pixels with
/// two smoothsteps (bright enough, and chromatically away from gray — the
/// backgrounds are exact grays), and flags eye pixels as the ones whose
/// chromaticity sits far from the mass-weighted mean direction. The eight
/// output dims are mass-weighted moments of those fields:
///
///   0..3  (mean chroma direction - gray axis) * 3          — hue carrier
///   3     mean squared chroma distance from gray * 2       — saturation
///   4     2 * x-spread / sqrt(mass)                        — face width
///   5     2 * y-spread / sqrt(mass)                        — face height
///   6     4 * eye mass fraction
///   7     eye x-spread / face x-spread                     — eye separation
///
/// All dims are ratios of mass-weighted sums, so the embedding is invariant
/// to translation and to cropping (background pixels carry exactly zero
/// mass), and the renderer's mouth/brow colors are exact scalar multiples of
/// skin, so expression changes leave every per-pixel statistic unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaceEmbedder;

/// Smoothstep edges, frozen after scanning the renderer palette over the
/// full hue range (see the gate-margin test): every real face pixel
/// saturates each gate at exactly 0 or 1.
const BRIGHT_GATE: (f64, f64) = (0.04, 0.16);
const COLOR_GATE: (f64, f64) = (0.01, 0.04);
const EYE_GATE: (f64, f64) = (0.05, 0.22);

/// Minimum face mass (in pixels) below which the plain embedder refuses.
const MIN_MASS: f64 = 1.0;

impl FaceEmbedder {
    /// Plain embedding of a [3,H,W] image or crop. Errors if no face-like
    /// pixels are present.
    pub fn embed(&self, face: &Tensor) -> Result<Tensor> {
        if face.shape().len() != 3 || face.shape()[0] != 3 {
            return Err(Error::Shape {
                context: "face embedding input",
                expected: vec![3, 0, 0],
                got: face.shape().to_vec(),
            });
        }
        let tape = Tape::new();
        let v = tape.leaf(face.clone());
        let (emb, mass) = self.embed_parts(&tape, v);
        let w = tape.value(mass).item();
        if !w.is_finite() || w < MIN_MASS {
            return Err(Error::DegenerateNorm(format!(
                "face mass {w:.3e} below {MIN_MASS} pixel"
            )));
        }
        Ok(tape.value(emb))
    }

    /// Tape version for use inside losses; shape [FACE_EMBED_DIM].
    pub fn embed_var<'t>(&self, tape: &'t Tape, face: Var<'t>) -> Var<'t> {
        self.embed_parts(tape, face).0
    }

    fn embed_parts<'t>(&self, tape: &'t Tape, face: Var<'t>) -> (Var<'t>, Var<'t>) {
        let shape = face.shape();
        assert_eq!(shape.len(), 3, "face must be [3,H,W]");
        assert_eq!(shape[0], 3, "face must be [3,H,W]");
        let (h, w) = (shape[1], shape[2]);
        let gray = 1.0 / 3f64.sqrt();
        let one = tape.scalar(1.0);

        // Unit chromaticity per pixel.
        let n2 = face.mul(face).sum_channels().add_scalar(1e-12); // [1,h,w]
        let ones_hw = tape.leaf(Tensor::full(&[1, h, w], 1.0));
        let inv_n = ones_hw.div(n2.sqrt());
        let c = face.broadcast_chan_mul(inv_n); // [3,h,w]

        // Distance from the gray axis and the face-pixel mass field.
        let gray_chw = tape.leaf(Tensor::full(&[3, h, w], gray));
        let dg = c.sub(gray_chw);
        let d_gray = dg.mul(dg).sum_channels(); // [1,h,w]
        let m = n2
            .smoothstep(BRIGHT_GATE.0, BRIGHT_GATE.1)
            .mul(d_gray.smoothstep(COLOR_GATE.0, COLOR_GATE.1)); // [1,h,w]
        let mass = m.sum();
        let inv_mass = one.div(mass.add_scalar(1e-12));

        // Mass-weighted mean chroma direction.
        let ones_col = tape.leaf(Tensor::full(&[h * w, 1], 1.0));
        let s = c.broadcast_chan_mul(m).reshape(&[3, h * w]).matmul(ones_col); // [3,1]
        let s_norm = s.transpose().matmul(s).reshape(&[1]).add_scalar(1e-12).sqrt();
        let chat = s.mul_scalar_var(one.div(s_norm)).reshape(&[3]); // [3]

        // Eye field: chromaticity far from the mean direction.
        let ones_chw = tape.leaf(Tensor::full(&[3, h, w], 1.0));
        let dc = c.sub(ones_chw.mul_channel_vec(chat));
        let dist2 = dc.mul(dc).sum_channels(); // [1,h,w]
        let e = dist2.smoothstep(EYE_GATE.0, EYE_GATE.1); // [1,h,w]

        // Dims 0..3: mean chroma deviation from gray.
        let gray3 = tape.leaf(Tensor::full(&[3], gray));
        let chroma_dev = chat.sub(gray3).scale(3.0);

        // Dim 3: saturation.
        let sat = m.mul(d_gray).sum().mul_scalar_var(inv_mass).scale(2.0);

        // Dims 4,5: mass spreads (variances are translation-invariant).
        let xg = tape.leaf(coord_grid(h, w, true));
        let yg = tape.leaf(coord_grid(h, w, false));
        let spread = |g: Var<'t>, wfield: Var<'t>, inv_w: Var<'t>| -> Var<'t> {
            let mu = wfield.mul(g).sum().mul_scalar_var(inv_w);
            let e2 = wfield.mul(g).mul(g).sum().mul_scalar_var(inv_w);
            e2.sub(mu.mul(mu)).relu().add_scalar(1e-12).sqrt()
        };
        let sx = spread(xg, m, inv_mass);
        let sy = spread(yg, m, inv_mass);
        let inv_sqrt_mass = one.div(mass.add_scalar(1e-12).sqrt());
        let rx = sx.mul_scalar_var(inv_sqrt_mass).scale(2.0);
        let ry = sy.mul_scalar_var(inv_sqrt_mass).scale(2.0);

        // Dims 6,7: eye statistics.
        let me = m.mul(e);
        let emass = me.sum();
        let inv_emass = one.div(emass.add_scalar(1e-12));
        let eye_frac = emass.mul_scalar_var(inv_mass).scale(4.0);
        let sex = spread(xg, me, inv_emass);
        let eye_ratio = sex.mul_scalar_var(one.div(sx.add_scalar(1e-12)));

        let emb = concat1(tape, &[chroma_dev, sat, rx, ry, eye_frac, eye_ratio]);
        (emb, mass)
    }
}

fn coord_grid(h: usize, w: usize, horizontal: bool) -> Tensor {
    let mut t = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            t.set3(0, y, x, if horizontal { x as f64 } else { y as f64 });
        }
    }
    t
}

/// Recover identity parameters from an embedding with the fixed analytic
/// probe (inverts the renderer's palette and geometry conventions).
pub fn probe_identity(emb: &Tensor) -> Result<crate::toyfaces::IdentityParams> {
    if emb.shape() != [FACE_EMBED_DIM] {
        return Err(Error::Shape {
            context: "identity probe",
            expected: vec![FACE_EMBED_DIM],
            got: emb.shape().to_vec(),
        });
    }
    let d = emb.data();
    let (r, g, b) = (d[0] / 3.0, d[1] / 3.0, d[2] / 3.0);
    // Hue: angle of the chroma deviation around the gray axis.
    let o1 = r - 0.5 * (g + b);
    let o2 = (g - b) * 3f64.sqrt() / 2.0;
    let hue = (o2.atan2(o1) / std::f64::consts::TAU).rem_euclid(1.0);
    // Eccentricity: vertical/horizontal spread ratio of the face ellipse.
    let k = (d[5] / d[4].max(1e-9)).max(0.0).sqrt();
    let ecc = ((k - 1.0) / 0.30).clamp(0.0, 1.0);
    // Eye separation: strip the within-eye variance (eye radius is a fixed
    // fraction of the half-width), then invert the placement rule.
    let q = d[7];
    let d_eye_over_a = ((q / 2.0).powi(2) - 0.0064).max(0.0).sqrt();
    let eyespan = ((d_eye_over_a - 0.30) / 0.32).clamp(0.0, 1.0);
    Ok(crate::toyfaces::IdentityParams { hue, ecc, eyespan })
}

// ---------------------------------------------------------------------------
// Augmentation head
// ---------------------------------------------------------------------------

/// Insert the trainable augmentation-head parameters (two dense layers
/// mapping [text row ‖ face embedding] back to a text row).
pub fn init_augmentation_head<R: Rng>(
    set: &mut ParamSet,
    rng: &mut R,
    d_text: usize,
    hidden: usize,
) -> Result<()> {
    let d_in = d_text + FACE_EMBED_DIM;
    set.insert("head.l1.w", normal_init(rng, &[d_in, hidden], 1.0 / (d_in as f64).sqrt()))?;
    set.insert("head.l1.b", Tensor::zeros(&[hidden]))?;
    set.insert("head.l2.w", normal_init(rng, &[hidden, d_text], 1.0 / (hidden as f64).sqrt()))?;
    set.insert("head.l2.b", Tensor::zeros(&[d_text]))?;
    Ok(())
}

/// Rewrite the identity-token row of `text_emb` from the reference face.
///
/// With no face this is the identity function (the very same tape node is
/// returned). With a face, the caption must contain an identity token; its
/// row becomes MLP([row ‖ φ(face)]) and every other row is untouched.
pub fn augment<'t>(
    tape: &'t Tape,
    bound: &Bound<'t>,
    embedder: &FaceEmbedder,
    text_emb: Var<'t>,
    tokens: &Tokens,
    face: Option<&Tensor>,
) -> Result<Var<'t>> {
    let Some(face) = face else {
        return Ok(text_emb);
    };
    let Some(idx) = locate_identity_token(tokens) else {
        return Err(Error::invalid(
            "face conditioning requires an identity token in the caption",
        ));
    };
    let femb = embedder.embed_var(tape, tape.leaf(face.clone()));
    let psi = text_emb.select_row(idx); // [d]
    let d = psi.shape()[0];
    let joint = concat1(tape, &[psi, femb]).reshape(&[1, d + FACE_EMBED_DIM]);
    let hid = joint
        .matmul(bound.var("head.l1.w"))
        .add_row_bias(bound.var("head.l1.b"))
        .silu();
    let row = hid
        .matmul(bound.var("head.l2.w"))
        .add_row_bias(bound.var("head.l2.b"))
        .reshape(&[d]);
    Ok(text_emb.set_row(idx, row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::toyfaces::{
        crop, face_palette, render_face, EmotionTable, FaceSpec, IdentityParams, DEFAULT_EMOTIONS,
    };

    fn default_vocab() -> Vocab {
        let emotions: Vec<String> = DEFAULT_EMOTIONS.iter().map(|s| s.to_string()).collect();
        Vocab::for_emotions(&emotions).unwrap()
    }

    fn table() -> EmotionTable {
        EmotionTable::default_table()
    }

    fn spec(hue: f64, ecc: f64, eyespan: f64, expression: &str) -> FaceSpec {
        FaceSpec {
            identity: IdentityParams { hue, ecc, eyespan },
            expression: expression.into(),
            gender: "woman".into(),
            background_id: 3,
        }
    }

    // ---- vocabulary + tokenizer ----

    #[test]
    fn vocab_roundtrip_and_oov() {
        let v = default_vocab();
        assert_eq!(v.id_of("<pad>"), Vocab::PAD);
        assert_eq!(v.id_of("zebra"), Vocab::UNK);
        assert_eq!(v.word(v.id_of("man")), "man");

        let dir = std::env::temp_dir().join(format!("portraitlab_vocab_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        v.write(&path).unwrap();
        let v2 = Vocab::read(&path).unwrap();
        assert_eq!(v, v2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn vocab_rejects_colliding_emotion() {
        let err = Vocab::for_emotions(&["happy".into(), "plain".into()]);
        assert!(err.is_err());
        let err = Vocab::for_emotions(&["happy".into(), "happy".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn encode_text_rules() {
        let v = default_vocab();
        assert!(encode_text("", &v).is_err());
        assert!(encode_text("   ", &v).is_err());
        let long = vec!["a"; 17].join(" ");
        assert!(encode_text(&long, &v).is_err());

        let t = encode_text("A Photo OF a happy MAN", &v).unwrap();
        assert_eq!(t.ids.len(), MAX_TOKENS);
        assert_eq!(t.n_real(), 6);
        assert_eq!(t.words[5], "man");
        assert_eq!(&t.ids[6..], &[Vocab::PAD; 10]);
        assert!(t.ids[..6].iter().all(|&id| id != Vocab::UNK));

        let t2 = encode_text("a gleeful man", &v).unwrap();
        assert_eq!(t2.ids[1], Vocab::UNK);
    }

    #[test]
    fn token_locators_find_first_occurrence() {
        let v = default_vocab();
        let t = encode_text("portrait of a sad woman", &v).unwrap();
        assert_eq!(locate_identity_token(&t), Some(4));
        assert_eq!(locate_emotion_token(&t, &table()), Some(3));

        let t = encode_text("a plain background", &v).unwrap();
        assert_eq!(locate_identity_token(&t), None);
        assert_eq!(locate_emotion_token(&t, &table()), None);

        let t = encode_text("a man and a woman", &v).unwrap();
        assert_eq!(locate_identity_token(&t), Some(1));
    }

    #[test]
    fn branch_thresholds_are_exact() {
        assert_eq!(draw_branch(0.0), CondBranch::Uncond);
        assert_eq!(draw_branch(0.0999999), CondBranch::Uncond);
        assert_eq!(draw_branch(0.10), CondBranch::TextOnly);
        assert_eq!(draw_branch(0.1999999), CondBranch::TextOnly);
        assert_eq!(draw_branch(0.20), CondBranch::Full);
        assert_eq!(draw_branch(0.99), CondBranch::Full);
    }

    // ---- text encoder ----

    #[test]
    fn text_encoder_is_frozen_and_deterministic() {
        let v = default_vocab();
        let enc1 = TextEncoder::new(&v, 32);
        let enc2 = TextEncoder::new(&v, 32);
        let t = encode_text("a happy man", &v).unwrap();
        assert_eq!(enc1.encode(&t), enc2.encode(&t));
        assert_eq!(enc1.null_conditioning(), enc2.null_conditioning());

        // null rows: all rows identical
        let n = enc1.null_conditioning();
        for i in 1..MAX_TOKENS {
            for j in 0..32 {
                assert_eq!(n.at2(i, j), n.at2(0, j));
            }
        }
    }

    #[test]
    fn single_word_edit_changes_exactly_one_row() {
        let v = default_vocab();
        let enc = TextEncoder::new(&v, 48);
        let a = enc.encode(&encode_text("a photo of a happy man", &v).unwrap());
        let b = enc.encode(&encode_text("a photo of a sad man", &v).unwrap());
        for i in 0..MAX_TOKENS {
            let differs = (0..48).any(|j| a.at2(i, j) != b.at2(i, j));
            assert_eq!(differs, i == 4, "row {i}");
        }
    }

    // ---- face embedder gates ----

    /// Scan the real palette over the whole hue range and check each gate
    /// saturates with margin on every pixel class the renderer can produce.
    #[test]
    fn gate_margins_hold_over_full_hue_range() {
        let gray = 1.0 / 3f64.sqrt();
        let chroma = |p: [u8; 3]| -> [f64; 3] {
            let v = [
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + 1e-12).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let n2 = |p: [u8; 3]| -> f64 {
            let v = [
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ];
            v.iter().map(|x| x * x).sum()
        };
        let dist2 = |a: [f64; 3], b: [f64; 3]| -> f64 {
            (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
        };

        for i in 0..=256 {
            let hue = i as f64 / 256.0;
            let (skin, mouth, eye) = face_palette(hue);
            let (cs, cm, ce) = (chroma(skin), chroma(mouth), chroma(eye));
            let g = [gray, gray, gray];

            // Every face class passes the brightness gate with margin.
            assert!(n2(skin) > BRIGHT_GATE.1 + 0.02, "skin n2 at hue {hue}");
            assert!(n2(mouth) > BRIGHT_GATE.1 + 0.02, "mouth n2 at hue {hue}");
            assert!(n2(eye) > BRIGHT_GATE.1 + 0.02, "eye n2 at hue {hue}");
            // Every face class is chromatic with margin; grays are exactly 0.
            assert!(dist2(cs, g) > COLOR_GATE.1 + 0.01, "skin gray-dist at hue {hue}");
            assert!(dist2(cm, g) > COLOR_GATE.1 + 0.01, "mouth gray-dist at hue {hue}");
            assert!(dist2(ce, g) > COLOR_GATE.1 + 0.01, "eye gray-dist at hue {hue}");
            // Mouth chromaticity is (numerically) the skin chromaticity.
            assert!(dist2(cs, cm) < 1e-20, "mouth/skin chroma at hue {hue}");
            // Eye chromaticity is far from skin: the eye gate separates them
            // even after the mean direction is pulled a few percent toward
            // the eyes (the worst complementary-hue pair sits near 0.30).
            assert!(dist2(cs, ce) > EYE_GATE.1 + 0.05, "eye/skin dist at hue {hue}");
            assert!(0.85 * dist2(cs, ce) > EYE_GATE.1, "pulled eye dist at hue {hue}");
        }

        // Background grays sit exactly at zero chromatic distance.
        for level in [16u8, 100, 150, 245] {
            let cg = chroma([level, level, level]);
            let g = [gray, gray, gray];
            assert!(dist2(cg, g) < 1e-12);
        }
    }

    // ---- face embedder invariances ----

    #[test]
    fn embedding_invariant_to_expression() {
        let em = table();
        let embedder = FaceEmbedder;
        for (i, id) in [(0u64, (0.05, 0.2, 0.8)), (1, (0.5, 0.9, 0.1)), (2, (0.83, 0.5, 0.5))] {
            let base = {
                let s = spec(id.0, id.1, id.2, "neutral");
                let out = render_face(&s, 40 + i, 32, &em).unwrap();
                embedder.embed(&out.image).unwrap()
            };
            for word in em.words() {
                let s = spec(id.0, id.1, id.2, word);
                let out = render_face(&s, 40 + i, 32, &em).unwrap();
                let e = embedder.embed(&out.image).unwrap();
                let diff = e.sub(&base).unwrap().max_abs();
                assert!(diff <= 1e-10, "expression {word}: drift {diff:.3e}");
            }
        }
    }

    #[test]
    fn embedding_of_crop_matches_full_image() {
        let em = table();
        let embedder = FaceEmbedder;
        for seed in 0..5u64 {
            let s = spec(0.13 * seed as f64 + 0.05, 0.4, 0.6, "happy");
            let out = render_face(&s, seed, 32, &em).unwrap();
            let full = embedder.embed(&out.image).unwrap();
            let cropped = embedder.embed(&crop(&out.image, out.bbox)).unwrap();
            let cos = full.cosine(&cropped).unwrap();
            assert!(cos > 0.9999, "crop/full cosine {cos}");
        }
    }

    #[test]
    fn identity_separation_over_many_specs() {
        let em = table();
        let embedder = FaceEmbedder;
        let words: Vec<&str> = em.words().collect();
        let n_id = 100;

        // One embedding per identity per expression (fresh render seed each
        // time, so jitter varies too).
        let mut per_identity: Vec<Vec<Tensor>> = Vec::new();
        for i in 0..n_id {
            let mut rng = substream(999, stream::DATA, 7, i as u64);
            let id = IdentityParams {
                hue: rng.random::<f64>(),
                ecc: rng.random::<f64>(),
                eyespan: rng.random::<f64>(),
            };
            let mut embs = Vec::new();
            for (j, word) in words.iter().enumerate() {
                let s = FaceSpec {
                    identity: id,
                    expression: word.to_string(),
                    gender: "man".into(),
                    background_id: (j % 8) as u8,
                };
                let out = render_face(&s, (i * 31 + j) as u64, 32, &em).unwrap();
                embs.push(embedder.embed(&out.image).unwrap());
            }
            per_identity.push(embs);
        }

        // Within-identity: every pair across expressions/renders.
        let mut min_within = f64::INFINITY;
        for embs in &per_identity {
            for a in 0..embs.len() {
                for b in (a + 1)..embs.len() {
                    min_within = min_within.min(embs[a].cosine(&embs[b]).unwrap());
                }
            }
        }
        assert!(min_within >= 0.999, "min within-identity cosine {min_within}");

        // Between-identity: first embedding of each, all pairs.
        let mut sum = 0.0;
        let mut count = 0usize;
        for a in 0..n_id {
            for b in (a + 1)..n_id {
                sum += per_identity[a][0].cosine(&per_identity[b][0]).unwrap();
                count += 1;
            }
        }
        let mean_between = sum / count as f64;
        assert!(
            mean_between <= min_within - 0.05,
            "between {mean_between:.4} vs within {min_within:.4}"
        );
    }

    #[test]
    fn embedding_drift_bounded_under_tiny_perturbation() {
        let em = table();
        let embedder = FaceEmbedder;
        let out = render_face(&spec(0.3, 0.5, 0.5, "happy"), 5, 32, &em).unwrap();
        let base = embedder.embed(&out.image).unwrap();
        let mut rng = substream(4242, stream::DATA, 0, 0);
        let noise = crate::rng::normal_tensor(&mut rng, out.image.shape());
        let perturbed = out.image.add(&noise.scale(1e-9)).unwrap();
        let moved = embedder.embed(&perturbed).unwrap();
        let drift = moved.sub(&base).unwrap().max_abs();
        assert!(drift <= 1e-6, "drift {drift:.3e}");
    }

    #[test]
    fn embedder_rejects_faceless_input() {
        let embedder = FaceEmbedder;
        // Pure gray image: zero face mass.
        let img = Tensor::full(&[3, 16, 16], 0.5);
        assert!(matches!(
            embedder.embed(&img),
            Err(Error::DegenerateNorm(_))
        ));
        // Black image: fails the brightness gate.
        let img = Tensor::zeros(&[3, 16, 16]);
        assert!(embedder.embed(&img).is_err());
    }

    // ---- identity probe ----

    #[test]
    fn probe_recovers_identity_parameters() {
        let em = table();
        let embedder = FaceEmbedder;
        let mut max_hue_err = 0.0f64;
        let mut max_ecc_err = 0.0f64;
        let mut max_span_err = 0.0f64;
        for i in 0..40u64 {
            let mut rng = substream(31337, stream::DATA, 3, i);
            let id = IdentityParams {
                hue: rng.random::<f64>(),
                // keep away from the clamp edges so errors are attributable
                ecc: 0.1 + 0.8 * rng.random::<f64>(),
                eyespan: 0.1 + 0.8 * rng.random::<f64>(),
            };
            let s = FaceSpec {
                identity: id,
                expression: "neutral".into(),
                gender: "man".into(),
                background_id: (i % 8) as u8,
            };
            let out = render_face(&s, i, 48, &em).unwrap();
            let emb = embedder.embed(&out.image).unwrap();
            let rec = probe_identity(&emb).unwrap();
            let dh = (rec.hue - id.hue).rem_euclid(1.0);
            let hue_err = dh.min(1.0 - dh);
            max_hue_err = max_hue_err.max(hue_err);
            max_ecc_err = max_ecc_err.max((rec.ecc - id.ecc).abs());
            max_span_err = max_span_err.max((rec.eyespan - id.eyespan).abs());
        }
        assert!(max_hue_err <= 0.10, "hue err {max_hue_err:.3}");
        assert!(max_ecc_err <= 0.25, "ecc err {max_ecc_err:.3}");
        assert!(max_span_err <= 0.35, "eyespan err {max_span_err:.3}");
    }

    // ---- augmentation head ----

    fn head_fixture(d: usize, hidden: usize) -> (Vocab, TextEncoder, ParamSet) {
        let v = default_vocab();
        let enc = TextEncoder::new(&v, d);
        let mut set = ParamSet::new();
        let mut rng = substream(77, stream::INIT, 0, 0);
        init_augmentation_head(&mut set, &mut rng, d, hidden).unwrap();
        (v, enc, set)
    }

    #[test]
    fn augment_without_face_is_the_identity() {
        let (v, enc, set) = head_fixture(24, 16);
        let t = encode_text("a happy man", &v).unwrap();
        let text_emb = enc.encode(&t);
        let tape = Tape::new();
        let bound = set.bind(&tape);
        let x = tape.leaf(text_emb.clone());
        let y = augment(&tape, &bound, &FaceEmbedder, x, &t, None).unwrap();
        assert_eq!(tape.value(y), text_emb);
    }

    #[test]
    fn augment_requires_identity_token() {
        let (v, enc, set) = head_fixture(24, 16);
        let em = table();
        let out = render_face(&spec(0.2, 0.3, 0.7, "happy"), 1, 32, &em).unwrap();
        let face = crop(&out.image, out.bbox);
        let t = encode_text("a plain background", &v).unwrap();
        let tape = Tape::new();
        let bound = set.bind(&tape);
        let x = tape.leaf(enc.encode(&t));
        assert!(augment(&tape, &bound, &FaceEmbedder, x, &t, Some(&face)).is_err());
    }

    #[test]
    fn augment_rewrites_only_the_identity_row() {
        let (v, enc, set) = head_fixture(24, 16);
        let em = table();
        let out = render_face(&spec(0.2, 0.3, 0.7, "happy"), 1, 32, &em).unwrap();
        let face = crop(&out.image, out.bbox);
        let t = encode_text("a photo of a happy woman", &v).unwrap();
        let text_emb = enc.encode(&t);
        let tape = Tape::new();
        let bound = set.bind(&tape);
        let x = tape.leaf(text_emb.clone());
        let y = augment(&tape, &bound, &FaceEmbedder, x, &t, Some(&face)).unwrap();
        let yv = tape.value(y);
        let idx = locate_identity_token(&t).unwrap();
        assert_eq!(idx, 5);
        for i in 0..MAX_TOKENS {
            let differs = (0..24).any(|j| yv.at2(i, j) != text_emb.at2(i, j));
            assert_eq!(differs, i == idx, "row {i}");
        }
    }

    #[test]
    fn augment_head_gradients_match_finite_differences() {
        let (v, enc, mut set) = head_fixture(8, 8);
        let em = table();
        let out = render_face(&spec(0.6, 0.4, 0.4, "sad"), 9, 16, &em).unwrap();
        let face = crop(&out.image, out.bbox);
        let t = encode_text("a sad man", &v).unwrap();
        let text_emb = enc.encode(&t);
        let mut probe_rng = substream(11, stream::INIT, 9, 9);
        let probe = crate::rng::normal_tensor(&mut probe_rng, &[MAX_TOKENS, 8]);

        let loss_of = |set: &ParamSet| -> f64 {
            let tape = Tape::new();
            let bound = set.bind(&tape);
            let x = tape.leaf(text_emb.clone());
            let y = augment(&tape, &bound, &FaceEmbedder, x, &t, Some(&face)).unwrap();
            tape.value(y.mul_const(&probe).sum()).item()
        };

        let names: Vec<String> = set.names().map(str::to_string).collect();
        let h = 1e-5;
        for name in &names {
            let analytic = {
                let tape = Tape::new();
                let bound = set.bind(&tape);
                let x = tape.leaf(text_emb.clone());
                let y = augment(&tape, &bound, &FaceEmbedder, x, &t, Some(&face)).unwrap();
                let g = tape.backward(y.mul_const(&probe).sum());
                g.wrt(bound.var(name))
            };
            let n = set.get(name).unwrap().numel();
            let mut max_rel = 0.0f64;
            for i in 0..n {
                let orig = set.get(name).unwrap().data()[i];
                set.get_mut(name).unwrap().data_mut()[i] = orig + h;
                let lp = loss_of(&set);
                set.get_mut(name).unwrap().data_mut()[i] = orig - h;
                let lm = loss_of(&set);
                set.get_mut(name).unwrap().data_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic.data()[i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max((an - fd).abs() / denom);
            }
            assert!(max_rel < 1e-4, "{name}: rel err {max_rel:.3e}");
        }
    }
}
