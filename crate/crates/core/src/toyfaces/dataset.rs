//! Corpus construction and the line-delimited manifest format.
//!
//! Layout under the output directory:
//!   images/NNNNNN.png   full renders (x_0)
//!   masks/NNNNNN.png    binary face masks (M)
//!   refs/NNNNNN.png     reference face crops from a different render
//!   manifest.jsonl      one record per line, relative paths
//!
//! Everything derives from the corpus seed through named substreams, so two
//! builds with equal (n, seed, config) produce byte-identical trees.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{make_caption, render_face, template_count};
use super::{EmotionTable, FaceSpec, IdentityParams, TrainingSample, GENDER_TOKENS};
use crate::error::{Error, Result};
use crate::imageio;
use crate::rng::{substream, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    /// Distinct identities; defaults to n/32 clamped to [1, n/2] so every
    /// identity recurs.
    pub n_identities: Option<usize>,
    pub image_size: usize,
    pub emotions: Vec<String>,
}

impl DatasetConfig {
    pub fn resolved_identities(&self) -> usize {
        let cap = (self.n / 2).max(1);
        self.n_identities
            .unwrap_or_else(|| (self.n / 32).max(2))
            .clamp(1, cap)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub image: String,
    pub mask: String,
    pub ref_face: String,
    pub caption: String,
    pub bbox: [usize; 4],
    pub gender: String,
    pub emotion: String,
    pub identity_id: usize,
}

fn identity_for(seed: u64, id: usize) -> (IdentityParams, String) {
    let mut rng = substream(seed, stream::DATA, 1, id as u64);
    let identity = IdentityParams {
        hue: rng.random::<f64>(),
        ecc: rng.random::<f64>(),
        eyespan: rng.random::<f64>(),
    };
    let gender = GENDER_TOKENS[usize::from(rng.random::<f64>() >= 0.5)].to_string();
    (identity, gender)
}

pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    if cfg.n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let emotions = EmotionTable::from_words(&cfg.emotions)?;
    let n_id = cfg.resolved_identities();

    for sub in ["images", "masks", "refs"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }

    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let identity_id = i % n_id;
        let (identity, gender) = identity_for(cfg.seed, identity_id);
        let mut rng = substream(cfg.seed, stream::DATA, 2, i as u64);

        let emotion = emotions.word_at(rng.random_range(0..emotions.len())).to_string();
        let background_id = rng.random_range(0..8u8);
        let template_id = rng.random_range(0..template_count());
        let render_seed = rng.random::<u64>();

        let ref_emotion = emotions.word_at(rng.random_range(0..emotions.len())).to_string();
        let ref_background = rng.random_range(0..8u8);
        let mut ref_seed = rng.random::<u64>();
        if ref_seed == render_seed {
            ref_seed ^= 1;
        }

        let spec = FaceSpec {
            identity,
            expression: emotion.clone(),
            gender: gender.clone(),
            background_id,
        };
        let out = render_face(&spec, render_seed, cfg.image_size, &emotions)?;

        let ref_spec = FaceSpec {
            identity,
            expression: ref_emotion,
            gender: gender.clone(),
            background_id: ref_background,
        };
        let ref_out = render_face(&ref_spec, ref_seed, cfg.image_size, &emotions)?;
        let ref_crop = crop(&ref_out.image, ref_out.bbox);

        let caption = make_caption(&spec, template_id)?;

        let name = format!("{i:06}.png");
        let rec = ManifestRecord {
            image: format!("images/{name}"),
            mask: format!("masks/{name}"),
            ref_face: format!("refs/{name}"),
            caption,
            bbox: out.bbox,
            gender,
            emotion,
            identity_id,
        };
        imageio::save_rgb(&out_dir.join("images").join(&name), &out.image)?;
        imageio::save_mask(&out_dir.join("masks").join(&name), &out.mask)?;
        imageio::save_rgb(&out_dir.join("refs").join(&name), &ref_crop)?;
        records.push(rec);
    }

    let mut manifest = String::new();
    for rec in &records {
        manifest.push_str(&serde_json::to_string(rec)?);
        manifest.push('\n');
    }
    fs::write(out_dir.join("manifest.jsonl"), manifest)?;
    Ok(records)
}

pub fn crop(image: &Tensor, bbox: [usize; 4]) -> Tensor {
    let [x0, y0, x1, y1] = bbox;
    let (h, w) = (y1 - y0, x1 - x0);
    let mut out = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.set3(c, y, x, image.at3(c, y0 + y, x0 + x));
            }
        }
    }
    out
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| {
            Error::data(format!("manifest line {}: {e}", lineno + 1))
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::data("manifest has no records"));
    }
    Ok(records)
}

pub fn load_sample(base_dir: &Path, rec: &ManifestRecord) -> Result<TrainingSample> {
    let image = imageio::load_rgb(&base_dir.join(&rec.image))?;
    let mask_raw = imageio::load_mask(&base_dir.join(&rec.mask))?;
    let ref_face = imageio::load_rgb(&base_dir.join(&rec.ref_face))?;
    let mask = mask_raw.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });

    let [x0, y0, x1, y1] = rec.bbox;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if !(x0 < x1 && y0 < y1 && x1 <= w && y1 <= h) {
        return Err(Error::data(format!("bbox {:?} invalid for {}x{}", rec.bbox, w, h)));
    }

    Ok(TrainingSample {
        image,
        caption: rec.caption.clone(),
        ref_face,
        face_mask: mask,
        face_bbox: rec.bbox,
        gender: rec.gender.clone(),
        emotion: rec.emotion.clone(),
        identity_id: rec.identity_id,
    })
}
