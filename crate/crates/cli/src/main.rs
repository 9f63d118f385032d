//! `tit`: data generation, staged training, translation, evaluation,
//! codebook inspection and ablations.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_assignment, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "tit", version, about = "Text image translation with a multimodal codebook")]
struct Cli {
    /// Base directory of every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// JSON object of flat dotted keys, such as {"stage4.beta": 0.25}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every default seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key, such as `--set model.codebook_size=128`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the parallel corpus, OCR pairs and translation images.
    GenData(GenDataArgs),
    /// Pretrain the text encoder and decoder on parallel text.
    TrainStage1(TrainArgs),
    /// Cluster text states into the codebook.
    TrainStage2(TrainArgs),
    /// Align image states with the codebook on OCR pairs.
    TrainStage3(TrainArgs),
    /// Fine-tune on text-image translation data.
    TrainStage4(TrainArgs),
    /// Translate a data split.
    Translate(TranslateArgs),
    /// Score translations of a data split.
    Evaluate(EvaluateArgs),
    /// Report which tokens and images map to latent codes.
    InspectCodebook(InspectArgs),
    /// Train and score ablation variants on one dataset.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Parallel sentence pairs.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// OCR-pair images.
    #[arg(long)]
    pub ocr_size: Option<usize>,
    /// Translation images.
    #[arg(long)]
    pub tit_size: Option<usize>,
    /// Total OCR error rate of the translation images.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Write images as PGM files instead of inline base64.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `gen-data`.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Output checkpoint; the log goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue the interrupted run stored in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many steps and leave a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Let the stage start from a checkpoint that skipped earlier stages.
    #[arg(long)]
    pub allow_skip: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// dev or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Ignore the images.
    #[arg(long)]
    pub text_only: bool,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint to decode with; not needed with `--hyps`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub text_only: bool,
    /// Score these translations, one per line, instead of decoding.
    #[arg(long)]
    pub hyps: Option<PathBuf>,
    /// Metrics JSON file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "dev")]
    pub split: String,
    /// Inspect one code; without it, every code goes to the CSV.
    #[arg(long)]
    pub code: Option<usize>,
    #[arg(long)]
    pub top: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Comma-separated variants; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = cli
        .set
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<Result<Vec<_>, _>>()?;
    let config = cli.config.as_ref().map(|p| cli.workdir.join(p));
    let run = RunConfig::load(config.as_deref(), cli.seed, &overrides)?;
    let ctx = commands::Context {
        workdir: cli.workdir,
        run,
    };
    match cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, &a),
        Command::TrainStage1(a) => commands::train(&ctx, 1, &a),
        Command::TrainStage2(a) => commands::train(&ctx, 2, &a),
        Command::TrainStage3(a) => commands::train(&ctx, 3, &a),
        Command::TrainStage4(a) => commands::train(&ctx, 4, &a),
        Command::Translate(a) => commands::translate(&ctx, &a),
        Command::Evaluate(a) => commands::evaluate(&ctx, &a),
        Command::InspectCodebook(a) => commands::inspect(&ctx, &a),
        Command::Ablate(a) => commands::ablate(&ctx, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
