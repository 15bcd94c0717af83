//! Command-line front end for the personalized face-generation laboratory:
//! corpus building, training, sampling, attention inspection, evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use portraitlab_cli::commands::{self, exit_code};

#[derive(Parser)]
#[command(
    name = "portraitlab",
    version,
    about = "Personalized face image generation at desk scale: build a \
             procedural corpus, train the identity-conditioned denoiser, \
             sample with guidance, inspect attention, evaluate."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the procedural face corpus (images, masks, reference crops,
    /// manifest.jsonl).
    BuildData {
        /// Run-configuration file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples [config default: 512].
        #[arg(long)]
        n: Option<usize>,
        /// Root seed for every randomness substream [config default: 0].
        #[arg(long)]
        seed: Option<u64>,
        /// Number of distinct identities [config default: derived from n].
        #[arg(long)]
        identities: Option<usize>,
        /// Square image side [config default: 32].
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train the denoiser with identity and attention-localization losses.
    Train {
        /// Run-configuration file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Total optimization steps [config default: 2000].
        #[arg(long)]
        steps: Option<usize>,
        /// Root seed for every randomness substream [config default: 0].
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for checkpoints and the log
        /// [config default: runs/default].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory holding manifest.jsonl [config default: data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from a checkpoint written by an equal-configuration run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample an image from a trained checkpoint.
    Generate {
        /// Trained checkpoint (JSON).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Caption; must contain an identity token when --face is given.
        #[arg(long, conflicts_with = "regions")]
        prompt: Option<String>,
        /// Reference face crop image for identity conditioning.
        #[arg(long, requires = "prompt")]
        face: Option<PathBuf>,
        /// Multi-subject request: JSON list of {prompt, mask|rect, face?}.
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Output image path; a sidecar .json is written next to it.
        #[arg(long, default_value = "out.png")]
        out: PathBuf,
        /// Run-configuration file for sampling defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sampling seed [config default: 0].
        #[arg(long)]
        seed: Option<u64>,
        /// Number of sampling steps [config default: 50].
        #[arg(long)]
        steps: Option<usize>,
        /// Classifier-free guidance scale [config default: 5].
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Render cross-attention heatmaps and in-mask/out-mask mass ratios for
    /// the identity and emotion tokens of corpus samples.
    InspectAttention {
        /// Trained or freshly initialized checkpoint (JSON).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory holding manifest.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for heatmaps and attention_ratios.json.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples to inspect [default: 1].
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Seed for sample selection and the noising draw [default: 0].
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Diffusion timestep of the inspected pass [default: t_max/2].
        #[arg(long)]
        t: Option<usize>,
    },
    /// Score a directory of generations: identity preservation, text-image
    /// consistency, expression coefficient.
    Evaluate {
        /// Directory holding generated images, reference crops, and
        /// prompts.jsonl; report.json and rows.csv are written here.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::BuildData { config, out, n, seed, identities, image_size } => {
            commands::build_data(&commands::BuildDataOpts {
                config,
                out,
                n,
                seed,
                identities,
                image_size,
            })
        }
        Cmd::Train { config, steps, seed, out, data, resume } => {
            commands::train(&commands::TrainOpts { config, steps, seed, out, data, resume })
        }
        Cmd::Generate {
            checkpoint,
            prompt,
            face,
            regions,
            out,
            config,
            seed,
            steps,
            guidance,
        } => commands::generate(&commands::GenerateOpts {
            checkpoint,
            prompt,
            face,
            regions,
            out,
            config,
            seed,
            steps,
            guidance,
        }),
        Cmd::InspectAttention { checkpoint, data, out, n, seed, t } => {
            commands::inspect_attention(&commands::InspectOpts {
                checkpoint,
                data,
                out,
                n,
                seed,
                t,
            })
        }
        Cmd::Evaluate { dir } => commands::evaluate(&commands::EvaluateOpts { dir }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
