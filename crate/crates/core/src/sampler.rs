//! Inference: deterministic coarse-to-fine sampling with classifier-free
//! guidance, plus a region-stitched multi-subject mode that averages the
//! guided noise predictions under per-pixel mask weights.
//!
//! Everything is deterministic given the seed: the initial latent comes from
//! a dedicated substream keyed by the seed alone (never by the prompt), and
//! each step is plain tensor arithmetic on the denoiser outputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::conditioning::{augment, encode_text, FaceEmbedder, TextEncoder, Tokens, Vocab};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::losses::IdentityCodec;
use crate::params::ParamSet;
use crate::rng::{normal_tensor, stream, substream};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::trainer::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMethod {
    /// Deterministic first-order update along the schedule.
    Euler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub method: SampleMethod,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 50,
            guidance_scale: 5.0,
            seed: 0,
            method: SampleMethod::Euler,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 1 {
            return Err(Error::config("num_steps must be at least 1"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::config("guidance scale must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One region of a multi-subject request.
#[derive(Debug, Clone)]
pub struct RegionSpec {
    /// [H,W] weights in [0,1].
    pub region_mask: Tensor,
    pub prompt: String,
    /// Reference face for identity conditioning; text-only region when absent.
    pub reference_face: Option<Tensor>,
}

/// Classifier-free guidance: eps_uncond + s * (eps_cond - eps_uncond).
/// The endpoints s = 0 and s = 1 return the respective input bit for bit.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, s: f64) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::Shape {
            context: "guidance combine",
            expected: eps_uncond.shape().to_vec(),
            got: eps_cond.shape().to_vec(),
        });
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_uncond.zip_map(eps_cond, |u, c| u + s * (c - u))
}

/// Per-pixel mask-weighted average of noise predictions. Every pixel must
/// carry positive total weight; each channel of the result is a convex
/// combination of the inputs at that pixel.
pub fn combine_predictions(preds: &[Tensor], masks: &[Tensor]) -> Result<Tensor> {
    if preds.is_empty() || preds.len() != masks.len() {
        return Err(Error::invalid("predictions and masks must pair up nonempty"));
    }
    let shape = preds[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid("predictions must be [C,H,W]"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for p in preds {
        if p.shape() != shape.as_slice() {
            return Err(Error::Shape {
                context: "region prediction",
                expected: shape.clone(),
                got: p.shape().to_vec(),
            });
        }
    }
    for m in masks {
        if m.shape() != [h, w] {
            return Err(Error::Shape {
                context: "region mask",
                expected: vec![h, w],
                got: m.shape().to_vec(),
            });
        }
        if m.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("region mask values must lie in [0,1]"));
        }
    }

    let mut out = Tensor::zeros(&shape);
    for y in 0..h {
        for x in 0..w {
            let total: f64 = masks.iter().map(|m| m.at2(y, x)).sum();
            if total == 0.0 {
                return Err(Error::invalid(format!(
                    "zero total region weight at pixel ({y}, {x})"
                )));
            }
            for ch in 0..c {
                let num: f64 = preds
                    .iter()
                    .zip(masks)
                    .map(|(p, m)| m.at2(y, x) * p.at3(ch, y, x))
                    .sum();
                out.set3(ch, y, x, num / total);
            }
        }
    }
    Ok(out)
}

/// Result of a sampling run: the decoded image and the hash of the initial
/// latent (for the sidecar and for seed-isolation checks).
#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// [3,H,W] in [0,1].
    pub image: Tensor,
    pub init_noise_sha256: String,
}

fn sha256_hex(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

enum Conditioning<'c> {
    Null,
    Text(Tokens),
    FullFace(Tokens, &'c Tensor),
}

/// Read-only sampling session over a frozen parameter set.
pub struct Sampler<'a> {
    sched: NoiseSchedule,
    vocab: &'a Vocab,
    encoder: &'a TextEncoder,
    denoiser: &'a Denoiser,
    embedder: FaceEmbedder,
    codec: IdentityCodec,
    params: &'a ParamSet,
}

impl<'a> Sampler<'a> {
    pub fn new(
        sched: NoiseSchedule,
        vocab: &'a Vocab,
        encoder: &'a TextEncoder,
        denoiser: &'a Denoiser,
        params: &'a ParamSet,
    ) -> Self {
        Sampler {
            sched,
            vocab,
            encoder,
            denoiser,
            embedder: FaceEmbedder,
            codec: IdentityCodec,
            params,
        }
    }

    pub fn from_trainer(trainer: &'a Trainer, params: &'a ParamSet) -> Self {
        Sampler::new(
            trainer.schedule().clone(),
            trainer.vocab(),
            trainer.encoder(),
            trainer.denoiser(),
            params,
        )
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn image_shape(&self) -> [usize; 3] {
        let s = self.denoiser.config().image_size;
        [3, s, s]
    }

    /// One denoiser evaluation; values only, no gradients kept.
    fn predict(&self, z: &Tensor, t: usize, cond: &Conditioning<'_>) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let rows = match cond {
            Conditioning::Null => tape.leaf(self.encoder.null_conditioning().clone()),
            Conditioning::Text(tokens) => tape.leaf(self.encoder.encode(tokens)),
            Conditioning::FullFace(tokens, face) => augment(
                &tape,
                &bound,
                &self.embedder,
                tape.leaf(self.encoder.encode(tokens)),
                tokens,
                Some(face),
            )?,
        };
        let out = self
            .denoiser
            .forward(&tape, &bound, tape.leaf(z.clone()), t, rows, false)?;
        Ok(tape.value(out.eps))
    }

    /// Guided prediction for one conditioning; skips the unconditional pass
    /// entirely when the scale makes it cancel. `shared_uncond` lets the
    /// multi-subject path reuse one unconditional evaluation per step.
    fn guided(
        &self,
        z: &Tensor,
        t: usize,
        cond: &Conditioning<'_>,
        s: f64,
        shared_uncond: Option<&Tensor>,
    ) -> Result<Tensor> {
        let eps_cond = self.predict(z, t, cond)?;
        if s == 1.0 {
            return Ok(eps_cond);
        }
        let eps_uncond = match shared_uncond {
            Some(e) => e.clone(),
            None => self.predict(z, t, &Conditioning::Null)?,
        };
        cfg_combine(&eps_uncond, &eps_cond, s)
    }

    fn initial_noise(&self, seed: u64) -> Tensor {
        let mut rng = substream(seed, stream::SAMPLER, 0, 0);
        normal_tensor(&mut rng, &self.image_shape())
    }

    /// Deterministic update z_t -> z_{t_prev}: reconstruct the clean
    /// estimate, then re-noise it to the previous grid point (t_prev = 0
    /// means done, leaving the clean estimate itself).
    fn step_update(&self, z: &Tensor, t: usize, t_prev: usize, eps: &Tensor) -> Result<Tensor> {
        let z0_hat = self.sched.one_step_reverse(z, eps, t)?;
        if t_prev == 0 {
            return Ok(z0_hat);
        }
        let ab_prev = self.sched.alpha_bar_or_one(t_prev)?;
        let (cs, cn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        z0_hat.zip_map(eps, |z0, e| cs * z0 + cn * e)
    }

    fn finish(&self, z: Tensor) -> Tensor {
        self.codec.decode(&z).map(|v| v.clamp(0.0, 1.0))
    }

    fn build_conditioning<'c>(
        &self,
        prompt: &str,
        face: Option<&'c Tensor>,
    ) -> Result<Conditioning<'c>> {
        let tokens = encode_text(prompt, self.vocab)?;
        match face {
            None => Ok(Conditioning::Text(tokens)),
            Some(f) => Ok(Conditioning::FullFace(tokens, f)),
        }
    }

    /// Generate one image from a prompt and an optional reference face.
    pub fn sample(
        &self,
        prompt: &str,
        reference_face: Option<&Tensor>,
        cfg: &SamplerConfig,
    ) -> Result<SampleOutput> {
        cfg.validate()?;
        let cond = self.build_conditioning(prompt, reference_face)?;
        // surface a missing identity token before running the whole loop
        if let Conditioning::FullFace(tokens, face) = &cond {
            let probe = Tape::new();
            let bound = self.params.bind(&probe);
            augment(
                &probe,
                &bound,
                &self.embedder,
                probe.leaf(self.encoder.encode(tokens)),
                tokens,
                Some(face),
            )?;
        }

        let mut z = self.initial_noise(cfg.seed);
        let init_noise_sha256 = sha256_hex(&z);
        let ts = self.sched.sampling_timesteps(cfg.num_steps)?;
        for (k, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(k + 1).copied().unwrap_or(0);
            let eps = self.guided(&z, t, &cond, cfg.guidance_scale, None)?;
            z = self.step_update(&z, t, t_prev, &eps)?;
        }
        Ok(SampleOutput { image: self.finish(z), init_noise_sha256 })
    }

    /// Region-stitched multi-subject generation: per step, one guided
    /// prediction per region, averaged per pixel under the normalized mask
    /// weights. Any canvas area no region covers is assigned an automatic
    /// text-only background region.
    pub fn multi_subject(&self, regions: &[RegionSpec], cfg: &SamplerConfig) -> Result<SampleOutput> {
        cfg.validate()?;
        if regions.is_empty() {
            return Err(Error::invalid("multi-subject sampling needs at least one region"));
        }
        let [_, h, w] = self.image_shape();
        for (i, r) in regions.iter().enumerate() {
            if r.region_mask.shape() != [h, w] {
                return Err(Error::Shape {
                    context: "multi-subject region mask",
                    expected: vec![h, w],
                    got: r.region_mask.shape().to_vec(),
                });
            }
            if r.region_mask.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(format!("region {i} mask values outside [0,1]")));
            }
        }

        // Uncovered canvas -> automatic text-only background region.
        let mut masks: Vec<Tensor> = regions.iter().map(|r| r.region_mask.clone()).collect();
        let mut conds: Vec<Conditioning<'_>> = regions
            .iter()
            .map(|r| self.build_conditioning(&r.prompt, r.reference_face.as_ref()))
            .collect::<Result<_>>()?;
        let mut background = Tensor::zeros(&[h, w]);
        let mut uncovered = false;
        for y in 0..h {
            for x in 0..w {
                let total: f64 = masks.iter().map(|m| m.at2(y, x)).sum();
                if total == 0.0 {
                    background.set2(y, x, 1.0);
                    uncovered = true;
                }
            }
        }
        if uncovered {
            masks.push(background);
            conds.push(self.build_conditioning("a photo", None)?);
        }

        let mut z = self.initial_noise(cfg.seed);
        let init_noise_sha256 = sha256_hex(&z);
        let ts = self.sched.sampling_timesteps(cfg.num_steps)?;
        let s = cfg.guidance_scale;
        for (k, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(k + 1).copied().unwrap_or(0);
            let shared_uncond = if s == 1.0 {
                None
            } else {
                Some(self.predict(&z, t, &Conditioning::Null)?)
            };
            let preds: Vec<Tensor> = conds
                .iter()
                .map(|c| self.guided(&z, t, c, s, shared_uncond.as_ref()))
                .collect::<Result<_>>()?;
            let eps = combine_predictions(&preds, &masks)?;
            z = self.step_update(&z, t, t_prev, &eps)?;
        }
        Ok(SampleOutput { image: self.finish(z), init_noise_sha256 })
    }
}
