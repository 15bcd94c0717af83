//! Implementations behind the command-line subcommands. Each returns a
//! `Result`; the binary maps errors to exit codes (configuration and
//! argument problems exit 2, runtime failures exit 1).

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use portraitlab_core::autodiff::Tape;
use portraitlab_core::conditioning::{
    augment, encode_text, locate_emotion_token, locate_identity_token,
};
use portraitlab_core::error::{Error, Result};
use portraitlab_core::evalkit::{self, attention_mass_ratio, token_attention_map};
use portraitlab_core::imageio::{load_mask, load_rgb, save_rgb};
use portraitlab_core::losses::FaceMask;
use portraitlab_core::rng::{normal_tensor, substream};
use portraitlab_core::sampler::{RegionSpec, Sampler, SamplerConfig};
use portraitlab_core::tensor::Tensor;
use portraitlab_core::toyfaces::build_dataset;
use portraitlab_core::toyfaces::{load_manifest, load_sample};
use portraitlab_core::trainer::{load_checkpoint, Trainer};

use crate::config::RunConfig;

/// Exit code for a failed command: 2 for configuration/argument problems,
/// 1 for runtime failures.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Vocab(_) | Error::Invalid(_) => 2,
        _ => 1,
    }
}

fn resolve_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

// ---------------------------------------------------------------------------
// build-data
// ---------------------------------------------------------------------------

pub struct BuildDataOpts {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub identities: Option<usize>,
    pub image_size: Option<usize>,
}

pub fn build_data(o: &BuildDataOpts) -> Result<()> {
    let mut cfg = resolve_config(o.config.as_deref())?;
    if let Some(n) = o.n {
        cfg.data.n = n;
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(ids) = o.identities {
        cfg.data.identities = Some(ids);
    }
    if let Some(s) = o.image_size {
        cfg.data.image_size = s;
    }
    let records = build_dataset(&cfg.dataset_config(), &o.out)?;
    println!(
        "wrote {} samples ({} identities, {}x{}) to {}",
        records.len(),
        cfg.dataset_config().resolved_identities(),
        cfg.data.image_size,
        cfg.data.image_size,
        o.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainOpts {
    pub config: Option<PathBuf>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub fn train(o: &TrainOpts) -> Result<()> {
    let mut cfg = resolve_config(o.config.as_deref())?;
    if let Some(steps) = o.steps {
        cfg.train.steps = steps;
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.train.out_dir = out.clone();
    }
    if let Some(data) = &o.data {
        cfg.data.dir = data.clone();
    }
    let trainer = Trainer::new(cfg.train_config()?)?;
    let resume = match &o.resume {
        None => None,
        Some(p) => Some(load_checkpoint(p)?),
    };
    let outcome = trainer.train(resume)?;
    for record in &outcome.records {
        println!("{}", serde_json::to_string(record)?);
    }
    eprintln!(
        "trained {} steps; checkpoint {}; log {}",
        outcome.records.last().map_or(0, |r| r.step),
        outcome.final_checkpoint.display(),
        outcome.log_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub struct GenerateOpts {
    pub checkpoint: PathBuf,
    pub prompt: Option<String>,
    pub face: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub guidance: Option<f64>,
}

/// One region request in a --regions JSON file: a prompt plus exactly one
/// of `mask` (grayscale image path) or `rect` ([x0, y0, x1, y1], half-open).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionEntry {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rect: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face: Option<PathBuf>,
}

fn region_mask(entry: &RegionEntry, h: usize, w: usize) -> Result<Tensor> {
    match (&entry.mask, &entry.rect) {
        (Some(path), None) => {
            let m = load_mask(path)?;
            if m.shape() != [h, w] {
                return Err(Error::invalid(format!(
                    "region mask {} is {:?}, expected [{h}, {w}]",
                    path.display(),
                    m.shape()
                )));
            }
            Ok(m)
        }
        (None, Some([x0, y0, x1, y1])) => {
            if x0 >= x1 || y0 >= y1 || *x1 > w || *y1 > h {
                return Err(Error::invalid(format!(
                    "region rect [{x0}, {y0}, {x1}, {y1}] does not fit a {w}x{h} canvas"
                )));
            }
            let mut m = Tensor::zeros(&[h, w]);
            for y in *y0..*y1 {
                for x in *x0..*x1 {
                    m.set2(y, x, 1.0);
                }
            }
            Ok(m)
        }
        _ => Err(Error::invalid(format!(
            "region {:?} needs exactly one of \"mask\" or \"rect\"",
            entry.prompt
        ))),
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    image: String,
    checkpoint: String,
    trained_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    face: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    regions: Option<&'a [RegionEntry]>,
    seed: u64,
    num_steps: usize,
    guidance_scale: f64,
    method: portraitlab_core::sampler::SampleMethod,
    init_noise_sha256: String,
}

pub fn generate(o: &GenerateOpts) -> Result<()> {
    if o.prompt.is_some() == o.regions.is_some() {
        return Err(Error::invalid(
            "generate needs exactly one of --prompt or --regions",
        ));
    }
    let cfg = resolve_config(o.config.as_deref())?;
    let mut scfg: SamplerConfig = cfg.sampler_config();
    if let Some(seed) = o.seed {
        scfg.seed = seed;
    }
    if let Some(steps) = o.steps {
        scfg.num_steps = steps;
    }
    if let Some(g) = o.guidance {
        scfg.guidance_scale = g;
    }

    let ckpt = load_checkpoint(&o.checkpoint)?;
    let trainer = Trainer::new(ckpt.config.clone())?;
    let sampler = Sampler::from_trainer(&trainer, &ckpt.params);
    let size = ckpt.config.denoiser.image_size;

    let mut region_echo: Vec<RegionEntry> = Vec::new();
    let output = match (&o.prompt, &o.regions) {
        (Some(prompt), None) => {
            let face = match &o.face {
                None => None,
                Some(p) => Some(load_rgb(p)?),
            };
            sampler.sample(prompt, face.as_ref(), &scfg)?
        }
        (None, Some(regions_path)) => {
            let text = fs::read_to_string(regions_path)?;
            let entries: Vec<RegionEntry> = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", regions_path.display())))?;
            if entries.is_empty() {
                return Err(Error::invalid("regions file holds no regions"));
            }
            let mut specs = Vec::with_capacity(entries.len());
            for entry in &entries {
                let mask = region_mask(entry, size, size)?;
                let face = match &entry.face {
                    None => None,
                    Some(p) => Some(load_rgb(p)?),
                };
                specs.push(RegionSpec {
                    region_mask: mask,
                    prompt: entry.prompt.clone(),
                    reference_face: face,
                });
            }
            region_echo = entries;
            sampler.multi_subject(&specs, &scfg)?
        }
        _ => unreachable!("validated above"),
    };

    save_rgb(&o.out, &output.image)?;
    let sidecar_path = o.out.with_extension("json");
    let sidecar = Sidecar {
        image: o.out.display().to_string(),
        checkpoint: o.checkpoint.display().to_string(),
        trained_steps: ckpt.step,
        prompt: o.prompt.as_deref(),
        face: o.face.as_ref().map(|p| p.display().to_string()),
        regions: if region_echo.is_empty() { None } else { Some(&region_echo) },
        seed: scfg.seed,
        num_steps: scfg.num_steps,
        guidance_scale: scfg.guidance_scale,
        method: scfg.method,
        init_noise_sha256: output.init_noise_sha256,
    };
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    fs::write(&sidecar_path, json)?;
    println!("wrote {} and {}", o.out.display(), sidecar_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect-attention
// ---------------------------------------------------------------------------

pub struct InspectOpts {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub n: usize,
    pub seed: u64,
    /// Diffusion timestep for the inspected forward pass; defaults to t_max/2.
    pub t: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayerRatios {
    pub stage: String,
    pub h: usize,
    pub w: usize,
    pub identity_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion_ratio: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleInspection {
    pub index: usize,
    pub caption: String,
    pub layers: Vec<LayerRatios>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InspectionReport {
    pub t: usize,
    pub n_samples: usize,
    pub heatmap_files: usize,
    /// Mean in-mask/out-mask attention mass ratio for the identity token,
    /// over every layer of every inspected sample.
    pub identity_ratio_mean: f64,
    /// Same for the emotion token, over samples whose caption carries one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion_ratio_mean: Option<f64>,
    pub samples: Vec<SampleInspection>,
}

/// Nearest-neighbor upscale of a [h,w] map into a [3,S,S] grayscale image,
/// normalized by the map's maximum.
fn heatmap_image(map: &Tensor, size: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let peak = map.data().iter().cloned().fold(0.0, f64::max);
    let mut img = Tensor::zeros(&[3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let sy = (y * h / size).min(h - 1);
            let sx = (x * w / size).min(w - 1);
            let v = if peak > 0.0 { map.at2(sy, sx) / peak } else { 0.0 };
            for ch in 0..3 {
                img.set3(ch, y, x, v);
            }
        }
    }
    img
}

pub fn inspect_attention(o: &InspectOpts) -> Result<()> {
    if o.n == 0 {
        return Err(Error::invalid("--n must be at least 1"));
    }
    let ckpt = load_checkpoint(&o.checkpoint)?;
    let trainer = Trainer::new(ckpt.config.clone())?;
    let t_max = ckpt.config.t_max;
    let t = o.t.unwrap_or(t_max / 2);
    if t < 1 || t > t_max {
        return Err(Error::invalid(format!(
            "timestep {t} outside the schedule range 1..={t_max}"
        )));
    }
    let manifest = load_manifest(&o.data.join("manifest.jsonl"))?;
    if manifest.is_empty() {
        return Err(Error::Data("empty dataset manifest".into()));
    }
    fs::create_dir_all(&o.out)?;

    let mut samples = Vec::with_capacity(o.n);
    let mut id_ratios = Vec::new();
    let mut em_ratios = Vec::new();
    let mut heatmap_files = 0usize;
    let size = ckpt.config.denoiser.image_size;

    for i in 0..o.n {
        let mut pick = substream(o.seed, "inspect", 0, i as u64);
        let index = pick.random_range(0..manifest.len());
        let sample = load_sample(&o.data, &manifest[index])?;
        let tokens = encode_text(&sample.caption, trainer.vocab())?;
        let idx_i = locate_identity_token(&tokens).ok_or_else(|| {
            Error::invalid(format!(
                "caption {:?} has no identity token to inspect",
                sample.caption
            ))
        })?;
        let idx_j = locate_emotion_token(&tokens, trainer.emotions());
        let mask = FaceMask::new(sample.face_mask.clone())?;

        let mut noise_rng = substream(o.seed, "inspect", 1, i as u64);
        let eps = normal_tensor(&mut noise_rng, &[3, size, size]);
        let z_t = trainer.schedule().forward_noise(&sample.image, t, &eps)?;

        let tape = Tape::new();
        let bound = ckpt.params.bind(&tape);
        let text = tape.leaf(trainer.encoder().encode(&tokens));
        let cond = augment(
            &tape,
            &bound,
            trainer.embedder(),
            text,
            &tokens,
            Some(&sample.ref_face),
        )?;
        let out = trainer
            .denoiser()
            .forward(&tape, &bound, tape.leaf(z_t), t, cond, true)?;

        let mut layers = Vec::with_capacity(out.attn.len());
        for (k, layer) in out.attn.iter().enumerate() {
            let map_val = layer.map.value();
            let id_map = token_attention_map(&map_val, layer.h, layer.w, idx_i)?;
            let identity_ratio = attention_mass_ratio(&id_map, &mask)?;
            id_ratios.push(identity_ratio);
            let path = o
                .out
                .join(format!("sample{i:02}_layer{k}_{}_identity.png", layer.stage));
            save_rgb(&path, &heatmap_image(&id_map, size))?;
            heatmap_files += 1;

            let emotion_ratio = match idx_j {
                None => None,
                Some(j) => {
                    let em_map = token_attention_map(&map_val, layer.h, layer.w, j)?;
                    let r = attention_mass_ratio(&em_map, &mask)?;
                    em_ratios.push(r);
                    let path = o
                        .out
                        .join(format!("sample{i:02}_layer{k}_{}_emotion.png", layer.stage));
                    save_rgb(&path, &heatmap_image(&em_map, size))?;
                    heatmap_files += 1;
                    Some(r)
                }
            };
            layers.push(LayerRatios {
                stage: layer.stage.to_string(),
                h: layer.h,
                w: layer.w,
                identity_ratio,
                emotion_ratio,
            });
        }
        samples.push(SampleInspection { index, caption: sample.caption.clone(), layers });
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = InspectionReport {
        t,
        n_samples: o.n,
        heatmap_files,
        identity_ratio_mean: mean(&id_ratios),
        emotion_ratio_mean: if em_ratios.is_empty() { None } else { Some(mean(&em_ratios)) },
        samples,
    };
    let path = o.out.join("attention_ratios.json");
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&path, json)?;
    println!(
        "inspected {} samples at t={}: {} heatmaps, identity in/out ratio {:.4}; report {}",
        o.n,
        t,
        heatmap_files,
        report.identity_ratio_mean,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub struct EvaluateOpts {
    pub dir: PathBuf,
}

pub fn evaluate(o: &EvaluateOpts) -> Result<()> {
    let report = evalkit::evaluate(&o.dir)?;
    println!("rows: {}", report.n_rows);
    if let Some(v) = report.id_pres {
        println!("identity preservation: {v:.4}");
    }
    println!("text-image consistency: {:.4}", report.clip_ti);
    if let Some(v) = report.expression_coeff {
        println!("expression coefficient: {v:.4}");
    }
    println!(
        "wrote {} and {}",
        o.dir.join("report.json").display(),
        o.dir.join("rows.csv").display()
    );
    Ok(())
}
