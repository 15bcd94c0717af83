//! Procedural face corpus with analytically known identity and expression
//! factors. Identity is (hue, eccentricity, eye spacing); expression moves
//! only the mouth and eyebrows. This disentanglement is what gives every
//! downstream metric its ground truth.

mod dataset;
mod render;

pub use dataset::{build_dataset, crop, load_manifest, load_sample, DatasetConfig, ManifestRecord};
pub use render::{face_palette, make_caption, render_face, template_count, RenderOutput};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GENDER_TOKENS: [&str; 2] = ["man", "woman"];

/// Default emotion vocabulary (the configured list may differ).
pub const DEFAULT_EMOTIONS: [&str; 11] = [
    "happy",
    "angry",
    "sad",
    "surprised",
    "fearful",
    "disgusted",
    "neutral",
    "calm",
    "excited",
    "bored",
    "confused",
];

/// Identity factors, each in [0,1]: color hue, face-ellipse eccentricity,
/// eye spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub hue: f64,
    pub ecc: f64,
    pub eyespan: f64,
}

impl IdentityParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("hue", self.hue), ("ecc", self.ecc), ("eyespan", self.eyespan)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("identity param {name}={v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Mouth/brow geometry for one emotion word: mouth curvature in [-1,1]
/// (negative = smile), brow slope in [-1,1], mouth openness in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpressionParams {
    pub curve: f64,
    pub brow: f64,
    pub open: f64,
}

/// Word -> geometry table driving both the renderer and the expression
/// metrics. The 11 default words have curated parameters; any extra
/// configured word gets deterministic hash-derived parameters so custom
/// emotion lists stay renderable.
#[derive(Debug, Clone)]
pub struct EmotionTable {
    entries: IndexMap<String, ExpressionParams>,
}

impl EmotionTable {
    pub fn from_words(words: &[String]) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::config("emotion list must not be empty"));
        }
        let mut entries = IndexMap::new();
        for w in words {
            let w = w.to_lowercase();
            if entries.insert(w.clone(), params_for_word(&w)).is_some() {
                return Err(Error::config(format!("duplicate emotion word {w:?}")));
            }
        }
        Ok(EmotionTable { entries })
    }

    pub fn default_table() -> Self {
        let words: Vec<String> = DEFAULT_EMOTIONS.iter().map(|s| s.to_string()).collect();
        Self::from_words(&words).expect("default list is valid")
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn get(&self, word: &str) -> Result<ExpressionParams> {
        self.entries
            .get(word)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown emotion word {word:?}")))
    }

    pub fn word_at(&self, idx: usize) -> &str {
        self.entries.get_index(idx).expect("index in range").0
    }
}

fn params_for_word(word: &str) -> ExpressionParams {
    match word {
        "happy" => ExpressionParams { curve: -1.0, brow: 0.4, open: 0.30 },
        "angry" => ExpressionParams { curve: 0.7, brow: -1.0, open: 0.20 },
        "sad" => ExpressionParams { curve: 1.0, brow: -0.3, open: 0.10 },
        "surprised" => ExpressionParams { curve: 0.0, brow: 0.8, open: 1.00 },
        "fearful" => ExpressionParams { curve: 0.4, brow: 0.9, open: 0.70 },
        "disgusted" => ExpressionParams { curve: 0.6, brow: -0.6, open: 0.40 },
        "neutral" => ExpressionParams { curve: 0.0, brow: 0.0, open: 0.15 },
        "calm" => ExpressionParams { curve: -0.2, brow: 0.1, open: 0.10 },
        "excited" => ExpressionParams { curve: -0.8, brow: 0.7, open: 0.80 },
        "bored" => ExpressionParams { curve: 0.3, brow: -0.2, open: 0.05 },
        "confused" => ExpressionParams { curve: -0.3, brow: 0.6, open: 0.25 },
        other => {
            // Deterministic fallback for custom lists.
            let h = crate::rng::substream_seed(0x45584252, other, 0, 0);
            let u = |k: u64| ((h.rotate_left((k * 17) as u32) & 0xffff) as f64) / 65535.0;
            ExpressionParams {
                curve: 2.0 * u(1) - 1.0,
                brow: 2.0 * u(2) - 1.0,
                open: u(3),
            }
        }
    }
}

/// Full render request: identity, expression word, gender token, background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSpec {
    pub identity: IdentityParams,
    pub expression: String,
    pub gender: String,
    pub background_id: u8,
}

impl FaceSpec {
    pub fn validate(&self, emotions: &EmotionTable) -> Result<()> {
        self.identity.validate()?;
        if !emotions.contains(&self.expression) {
            return Err(Error::invalid(format!(
                "expression {:?} not in the configured emotion list",
                self.expression
            )));
        }
        if !GENDER_TOKENS.contains(&self.gender.as_str()) {
            return Err(Error::invalid(format!(
                "gender token {:?} must be one of {GENDER_TOKENS:?}",
                self.gender
            )));
        }
        Ok(())
    }
}

/// One corpus entry as consumed by the trainer.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// [3,H,W] in [0,1]
    pub image: Tensor,
    pub caption: String,
    /// [3,h,w] crop of a different render of the same identity
    pub ref_face: Tensor,
    /// [H,W] in [0,1]
    pub face_mask: Tensor,
    /// Half-open pixel rectangle [x0, y0, x1, y1]
    pub face_bbox: [usize; 4],
    pub gender: String,
    pub emotion: String,
    pub identity_id: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_emotion_params_are_pairwise_distinct() {
        let t = EmotionTable::default_table();
        let all: Vec<ExpressionParams> = t.words().map(|w| t.get(w).unwrap()).collect();
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                assert_ne!(all[i], all[j], "emotions {i} and {j} share parameters");
            }
        }
        assert_eq!(t.len(), 11);
    }

    #[test]
    fn custom_words_get_deterministic_params() {
        let t = EmotionTable::from_words(&["wistful".into(), "happy".into()]).unwrap();
        let a = t.get("wistful").unwrap();
        let b = t.get("wistful").unwrap();
        assert_eq!(a, b);
        assert!((-1.0..=1.0).contains(&a.curve));
        assert!((0.0..=1.0).contains(&a.open));
        // curated word keeps its curated value
        assert_eq!(t.get("happy").unwrap().curve, -1.0);
    }

    #[test]
    fn spec_validation() {
        let emotions = EmotionTable::default_table();
        let mut spec = FaceSpec {
            identity: IdentityParams { hue: 0.3, ecc: 0.5, eyespan: 0.7 },
            expression: "happy".into(),
            gender: "woman".into(),
            background_id: 2,
        };
        assert!(spec.validate(&emotions).is_ok());
        spec.identity.hue = 1.5;
        assert!(spec.validate(&emotions).is_err());
        spec.identity.hue = 0.5;
        spec.gender = "person".into();
        assert!(spec.validate(&emotions).is_err());
        spec.gender = "man".into();
        spec.expression = "melancholic".into();
        assert!(spec.validate(&emotions).is_err());
    }
}
