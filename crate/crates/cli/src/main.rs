//! `facectl`: dataset generation, two-stage training, guided sampling,
//! binarization, evaluation and verification.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facectl_core::Profile;

use config::Precision;

#[derive(Debug, Parser)]
#[command(name = "facectl", version, about = "Coarse-to-fine controllable facial-motion diffusion")]
struct Cli {
    /// Default bundle that overrides are applied on top of.
    #[arg(long, global = true, default_value = "desk", value_parser = parse_profile)]
    profile: Profile,
    /// Master seed; every component draws from a named sub-stream of it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: facectl_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train the base model (stage 1) or the fine adapter (stage 2).
    Train(TrainArgs),
    /// Sample motion for dataset clips with optional fine control.
    Sample(SampleArgs),
    /// Turn motion files into fine conditions.
    Binarize(BinarizeArgs),
    /// Score sampled motion against a dataset.
    Eval(EvalArgs),
    /// Run the gradient, guidance, adapter and oracle checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_clips: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub max_events: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-1 output directory; required for stage 2.
    #[arg(long)]
    pub base_checkpoint: Option<PathBuf>,
    /// Continue from the checkpoint already in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub p_swap: Option<f64>,
    #[arg(long)]
    pub p_triplet: Option<f64>,
    #[arg(long)]
    pub p_au: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub ff_hidden: Option<usize>,
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    /// Periodic checkpoint interval in iterations; 0 keeps only the final one.
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: usize,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Training output directory holding the model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = facectl_core::diffusion::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    /// JSON list of triplets `{"aus": [..], "start": s, "end": e}` applied to every clip.
    #[arg(long)]
    pub fine: Option<PathBuf>,
    /// Replace each clip's emotion label.
    #[arg(long)]
    pub emotion: Option<usize>,
    /// Comma-separated clip indices; defaults to the validation split.
    #[arg(long, value_delimiter = ',')]
    pub clips: Vec<usize>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct BinarizeArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub motion: Vec<PathBuf>,
    /// Output JSON mapping each input file to its triplets.
    #[arg(long)]
    pub out: PathBuf,
    /// AU vocabulary JSON; the built-in ARKit mapping otherwise.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub spacing: Option<usize>,
    #[arg(long)]
    pub merge_prob: Option<f64>,
    #[arg(long)]
    pub min_run: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory of `NNNN.motion` files, with `samples.json` when written by `sample`.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classifier_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    /// Trained checkpoint for the adapter-identity check; a fresh model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Negative control: give the adapter's zero projection nonzero weights.
    #[arg(long)]
    pub corrupt_zero_proj: bool,
    /// Smaller instance counts for a quick pass.
    #[arg(long)]
    pub quick: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let ctx = commands::Context { profile: cli.profile, seed: cli.seed };
    let outcome = match cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Sample(a) => commands::sample(&ctx, a),
        Command::Binarize(a) => commands::binarize(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Verify(a) => commands::verify(&ctx, a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
