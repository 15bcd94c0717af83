//! The training loop: per-sample timestep/conditioning/mask draws, one tape
//! per step over the whole batch, clipped momentum updates on the denoiser
//! and augmentation-head parameters, JSONL logging, and resumable
//! checkpoints.
//!
//! All randomness is drawn from stateless substreams keyed by
//! (seed, purpose, step, sample slot), so resuming from a checkpoint at any
//! step reproduces the uninterrupted run bit for bit.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::conditioning::{
    augment, draw_branch, encode_text, init_augmentation_head, locate_emotion_token,
    locate_identity_token, CondBranch, FaceEmbedder, TextEncoder, Vocab,
};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::losses::{
    identity_loss, localization_loss, noise_loss, total_loss, FaceMask, IdentityCodec, LossWeights,
};
use crate::params::ParamSet;
use crate::rng::{normal_tensor, stream, substream, uniform01, uniform_timestep};
use crate::schedule::NoiseSchedule;
use crate::toyfaces::{load_manifest, load_sample, EmotionTable, TrainingSample};

pub const CHECKPOINT_FORMAT: &str = "portraitlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Momentum coefficient of the gradient update.
    pub momentum: f64,
    /// Gradients are rescaled when their global norm exceeds this.
    pub clip_norm: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Diffusion schedule: number of steps and linear-beta endpoints.
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Dataset manifest (images resolved relative to its directory).
    pub manifest: PathBuf,
    /// Output directory for checkpoints and the training log.
    pub out_dir: PathBuf,
    pub checkpoint_interval: usize,
    pub denoiser: DenoiserConfig,
    /// Hidden width of the identity-row augmentation MLP.
    pub head_hidden: usize,
    /// Emotion vocabulary; must cover the dataset's caption emotions.
    pub emotions: Vec<String>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0,1)"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip norm must be positive"));
        }
        if self.checkpoint_interval < 1 {
            return Err(Error::config("checkpoint interval must be at least 1"));
        }
        if self.head_hidden < 1 {
            return Err(Error::config("augmentation head hidden width must be positive"));
        }
        self.denoiser.validate()?;
        self.loss_weights.validate(self.t_max)?;
        // schedule endpoint checks live in the schedule constructor
        NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end)?;
        Ok(())
    }
}

/// Per-sample random draws for one training step, all from stateless
/// substreams so they depend only on (seed, step, slot).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draws {
    pub t: usize,
    pub branch: CondBranch,
    pub masked: bool,
}

pub fn sample_draws(seed: u64, t_max: usize, face_fraction: f64, step: usize, slot: usize) -> Draws {
    let (step, slot) = (step as u64, slot as u64);
    let mut rt = substream(seed, stream::TIMESTEP, step, slot);
    let t = uniform_timestep(&mut rt, t_max);
    let mut rb = substream(seed, stream::DROPOUT, step, slot);
    let branch = draw_branch(uniform01(&mut rb));
    let mut rf = substream(seed, stream::FACE_REGION, step, slot);
    let masked = uniform01(&mut rf) < face_fraction;
    Draws { t, branch, masked }
}

/// Dataset index for one batch slot.
pub fn batch_index(seed: u64, step: usize, slot: usize, n: usize) -> usize {
    let mut r = substream(seed, stream::BATCH, step as u64, slot as u64);
    ((uniform01(&mut r) * n as f64) as usize).min(n - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub t: usize,
    pub branch: String,
    pub masked: bool,
    pub noise: f64,
    pub identity: f64,
    pub localization: f64,
    pub total: f64,
    pub gated: bool,
}

/// One log line per training step: the per-sample draws and losses plus the
/// batch means actually driving the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub samples: Vec<SampleRecord>,
    pub noise: f64,
    pub identity: f64,
    pub localization: f64,
    pub total: f64,
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub velocity: ParamSet,
}

impl OptState {
    pub fn new(params: &ParamSet) -> Self {
        OptState { velocity: params.zeros_like() }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Completed training steps.
    pub step: usize,
    pub config: TrainConfig,
    /// Frozen vocabulary, stored for self-description and drift detection.
    pub vocab_words: Vec<String>,
    pub params: ParamSet,
    pub momentum: ParamSet,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut f, ckpt)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unrecognized checkpoint format {:?}",
            ckpt.format
        )));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    if !ckpt.params.is_finite() || !ckpt.momentum.is_finite() {
        return Err(Error::Checkpoint("checkpoint contains non-finite values".into()));
    }
    let expected = Vocab::for_emotions(&ckpt.config.emotions)?;
    if expected.words() != ckpt.vocab_words.as_slice() {
        return Err(Error::Checkpoint(
            "stored vocabulary does not match the configured emotion list".into(),
        ));
    }
    Ok(ckpt)
}

/// Everything fixed for the duration of a run: config, schedule, frozen
/// text encoder and face embedder, and the denoiser architecture.
pub struct Trainer {
    cfg: TrainConfig,
    sched: NoiseSchedule,
    vocab: Vocab,
    emotions: EmotionTable,
    encoder: TextEncoder,
    embedder: FaceEmbedder,
    codec: IdentityCodec,
    denoiser: Denoiser,
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub params: ParamSet,
    pub opt: OptState,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sched = NoiseSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end)?;
        let emotions = EmotionTable::from_words(&cfg.emotions)?;
        let vocab = Vocab::for_emotions(&cfg.emotions)?;
        let encoder = TextEncoder::new(&vocab, cfg.denoiser.cond_dim);
        let denoiser = Denoiser::new(cfg.denoiser.clone())?;
        Ok(Trainer {
            cfg,
            sched,
            vocab,
            emotions,
            encoder,
            embedder: FaceEmbedder,
            codec: IdentityCodec,
            denoiser,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn embedder(&self) -> &FaceEmbedder {
        &self.embedder
    }

    pub fn emotions(&self) -> &EmotionTable {
        &self.emotions
    }

    /// Fresh trainable parameters (denoiser plus augmentation head) from the
    /// run seed. The text encoder and face embedder carry no trainable state.
    pub fn init_params(&self) -> Result<ParamSet> {
        let mut rng = substream(self.cfg.seed, stream::INIT, 0, 0);
        let mut set = ParamSet::new();
        self.denoiser.init_params(&mut set, &mut rng)?;
        init_augmentation_head(
            &mut set,
            &mut rng,
            self.cfg.denoiser.cond_dim,
            self.cfg.head_hidden,
        )?;
        Ok(set)
    }

    /// One gradient step over `batch`. `step` is the 1-indexed global step
    /// and is the only state the random draws depend on.
    pub fn train_step(
        &self,
        step: usize,
        batch: &[TrainingSample],
        params: &mut ParamSet,
        opt: &mut OptState,
    ) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let w = &self.cfg.loss_weights;
        let s = self.cfg.denoiser.image_size;
        let tape = Tape::new();
        let bound = params.bind(&tape);

        let mut batch_total: Option<crate::autodiff::Var<'_>> = None;
        let mut samples = Vec::with_capacity(batch.len());
        for (slot, sample) in batch.iter().enumerate() {
            let draws = sample_draws(
                self.cfg.seed,
                self.cfg.t_max,
                w.face_region_loss_fraction,
                step,
                slot,
            );
            let mut rn = substream(self.cfg.seed, stream::NOISE, step as u64, slot as u64);
            let eps = normal_tensor(&mut rn, &[3, s, s]);
            let z0 = self.codec.encode(&sample.image);
            let z_t = self.sched.forward_noise(&z0, draws.t, &eps)?;

            let tokens = encode_text(&sample.caption, &self.vocab)?;
            let cond = match draws.branch {
                CondBranch::Uncond => tape.leaf(self.encoder.null_conditioning().clone()),
                CondBranch::TextOnly => tape.leaf(self.encoder.encode(&tokens)),
                CondBranch::Full => augment(
                    &tape,
                    &bound,
                    &self.embedder,
                    tape.leaf(self.encoder.encode(&tokens)),
                    &tokens,
                    Some(&sample.ref_face),
                )?,
            };
            // Attention maps are only needed for the localization term; with
            // both localization weights at zero (the attention-control
            // ablation) the term and its gradient vanish, so skip the capture.
            let attn_control = w.lambda_id_loc != 0.0 || w.mu_expr_loc != 0.0;
            let capture = draws.branch == CondBranch::Full && attn_control;
            let out = self
                .denoiser
                .forward(&tape, &bound, tape.leaf(z_t.clone()), draws.t, cond, capture)?;
            if !out.eps.value().is_finite() {
                return Err(Error::NonFinite {
                    step: step as u64,
                    sample: slot,
                    detail: format!(
                        "denoiser output at t={} branch={}",
                        draws.t,
                        draws.branch.label()
                    ),
                });
            }

            let region = if draws.masked { Some(&sample.face_mask) } else { None };
            let nl = noise_loss(&tape, out.eps, &eps, region)?;

            let (id, loc, gated) = if draws.branch == CondBranch::Full {
                let id = identity_loss(
                    &tape,
                    &z_t,
                    out.eps,
                    draws.t,
                    &self.sched,
                    &self.codec,
                    sample.face_bbox,
                    &sample.ref_face,
                    &self.embedder,
                    w,
                )?;
                let loc = if attn_control {
                    let idx_i = locate_identity_token(&tokens).ok_or_else(|| {
                        Error::invalid("full-conditioning sample without an identity token")
                    })?;
                    let idx_j = locate_emotion_token(&tokens, &self.emotions);
                    let fm = FaceMask::new(sample.face_mask.clone())?;
                    Some(localization_loss(&tape, &out.attn, &fm, idx_i, idx_j, w)?)
                } else {
                    None
                };
                let gated = id.is_none();
                (id, loc, gated)
            } else {
                (None, None, true)
            };

            let (sample_total, report) = total_loss(nl, id, loc, gated);
            if !report.total.is_finite() {
                return Err(Error::NonFinite {
                    step: step as u64,
                    sample: slot,
                    detail: format!(
                        "loss (noise {:.3e}, identity {:.3e}, localization {:.3e}) at t={} branch={}",
                        report.noise,
                        report.identity,
                        report.localization,
                        draws.t,
                        draws.branch.label()
                    ),
                });
            }
            samples.push(SampleRecord {
                t: draws.t,
                branch: draws.branch.label().to_string(),
                masked: draws.masked,
                noise: report.noise,
                identity: report.identity,
                localization: report.localization,
                total: report.total,
                gated: report.gated,
            });
            batch_total = Some(match batch_total {
                None => sample_total,
                Some(acc) => acc.add(sample_total),
            });
        }

        let batch_loss = batch_total.expect("nonempty batch").scale(1.0 / batch.len() as f64);
        let grads = tape.backward(batch_loss);

        // Global-norm clip over all trainable parameters.
        let mut collected: Vec<(String, crate::tensor::Tensor)> = Vec::new();
        let mut norm_sq = 0.0;
        for (name, var) in bound.iter() {
            let g = grads.wrt(var);
            norm_sq += g.data().iter().map(|v| v * v).sum::<f64>();
            collected.push((name.to_string(), g));
        }
        let norm = norm_sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: step as u64,
                sample: 0,
                detail: format!("gradient norm {norm}"),
            });
        }
        let scale = if norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };

        let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
        for (name, g) in &collected {
            let v = opt.velocity.get_mut(name)?;
            for (vk, gk) in v.data_mut().iter_mut().zip(g.data()) {
                *vk = mu * *vk + gk * scale;
            }
            let v_now = v.clone();
            let p = params.get_mut(name)?;
            for (pk, vk) in p.data_mut().iter_mut().zip(v_now.data()) {
                *pk -= lr * vk;
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite {
                step: step as u64,
                sample: 0,
                detail: "parameter update produced non-finite values".into(),
            });
        }

        let n = samples.len() as f64;
        let mean = |f: fn(&SampleRecord) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Ok(StepRecord {
            step,
            samples: samples.clone(),
            noise: mean(|r| r.noise),
            identity: mean(|r| r.identity),
            localization: mean(|r| r.localization),
            total: mean(|r| r.total),
        })
    }

    fn checkpoint(&self, step: usize, params: &ParamSet, opt: &OptState) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            step,
            config: self.cfg.clone(),
            vocab_words: self.vocab.words().to_vec(),
            params: params.clone(),
            momentum: opt.velocity.clone(),
        }
    }

    /// Run the loop from scratch or from a checkpoint. Writes one JSONL
    /// record per step to `out_dir/train_log.jsonl`, checkpoints every
    /// `checkpoint_interval` steps, and always writes
    /// `out_dir/checkpoint_final.json` at the end.
    pub fn train(&self, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
        let manifest = load_manifest(&self.cfg.manifest)?;
        if manifest.is_empty() {
            return Err(Error::Data("empty dataset manifest".into()));
        }
        let base_dir = self
            .cfg
            .manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        // Preload the full corpus; desk-scale datasets fit comfortably.
        let corpus: Vec<TrainingSample> = manifest
            .iter()
            .map(|rec| load_sample(&base_dir, rec))
            .collect::<Result<_>>()?;

        let resuming = resume.is_some();
        let (mut params, mut opt, start) = match resume {
            None => {
                let p = self.init_params()?;
                let o = OptState::new(&p);
                (p, o, 1)
            }
            Some(ckpt) => {
                if ckpt.config != self.cfg {
                    return Err(Error::Checkpoint(
                        "checkpoint configuration does not match the requested run".into(),
                    ));
                }
                if ckpt.step >= self.cfg.steps {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint already at step {} of {}",
                        ckpt.step, self.cfg.steps
                    )));
                }
                let start = ckpt.step + 1;
                (ckpt.params, OptState { velocity: ckpt.momentum }, start)
            }
        };

        fs::create_dir_all(&self.cfg.out_dir)?;
        let log_path = self.cfg.out_dir.join("train_log.jsonl");
        // A fresh run starts a fresh log; a resumed run extends the one it
        // left behind, keeping one record per completed step either way.
        let mut log_opts = fs::OpenOptions::new();
        log_opts.create(true).write(true);
        if resuming {
            log_opts.append(true);
        } else {
            log_opts.truncate(true);
        }
        let mut log = std::io::BufWriter::new(log_opts.open(&log_path)?);

        let mut records = Vec::with_capacity(self.cfg.steps + 1 - start);
        for step in start..=self.cfg.steps {
            let batch: Vec<TrainingSample> = (0..self.cfg.batch_size)
                .map(|slot| corpus[batch_index(self.cfg.seed, step, slot, corpus.len())].clone())
                .collect();
            let record = self.train_step(step, &batch, &mut params, &mut opt)?;
            serde_json::to_writer(&mut log, &record)?;
            log.write_all(b"\n")?;
            records.push(record);

            if step % self.cfg.checkpoint_interval == 0 && step < self.cfg.steps {
                let path = self.cfg.out_dir.join(format!("checkpoint_{step:06}.json"));
                save_checkpoint(&path, &self.checkpoint(step, &params, &opt))?;
            }
        }
        log.flush()?;

        let final_checkpoint = self.cfg.out_dir.join("checkpoint_final.json");
        save_checkpoint(
            &final_checkpoint,
            &self.checkpoint(self.cfg.steps, &params, &opt),
        )?;
        Ok(TrainOutcome { params, opt, records, final_checkpoint, log_path })
    }
}
