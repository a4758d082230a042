use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hintvqa::{HintMode, Language};

mod commands;
mod config;

#[derive(Debug, Parser)]
#[command(
    name = "hintvqa",
    version,
    about = "Hint-fused ConvS2S answer generation for visual question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with oracle hints and patch features.
    GenData(GenDataArgs),
    /// Build a vocabulary over questions, answers and hints.
    BuildVocab(BuildVocabArgs),
    /// Emit the combined encoder input sequence of every sample.
    Prepare(PrepareArgs),
    /// Train a model and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Generate answers with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions with token F1 and BLEU.
    Evaluate(EvaluateArgs),
    /// Answer length and vocabulary statistics.
    Stats(StatsArgs),
    /// Write attention matrices, heatmaps and axis labels.
    ExportAttention(ExportAttentionArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HintsArg {
    None,
    Classifier,
    Generative,
    Both,
}

impl From<HintsArg> for HintMode {
    fn from(h: HintsArg) -> Self {
        match h {
            HintsArg::None => HintMode::None,
            HintsArg::Classifier => HintMode::Classifier,
            HintsArg::Generative => HintMode::Generative,
            HintsArg::Both => HintMode::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Scale {
    #[default]
    Desk,
    Reference,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "en,vi,ja")]
    pub languages: Vec<Language>,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub corruption: f64,
    #[arg(long, default_value_t = 8)]
    pub patches: usize,
    /// Feature width; must match the model embedding width.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dev_fraction: f64,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Dataset files (JSONL); repeatable.
    #[arg(long = "data", required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub hint_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Inputs shared by every command that assembles encoder sequences.
#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub hint_file: Option<PathBuf>,
    /// Directory of `<image_id>.vfea` files.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AssemblyFlags {
    #[arg(long, value_enum)]
    pub hints: Option<HintsArg>,
    #[arg(long, value_enum)]
    pub visual: Option<Switch>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    pub scale: Scale,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub assembly: AssemblyFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub assembly: AssemblyFlags,
    /// Development set (JSONL); its loss is measured after every epoch.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_units: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub dropout_keep: Option<f64>,
    #[arg(long)]
    pub max_decode_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Dataset file holding the gold answers.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-language F1/BLEU score histograms here.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub bin_width: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only use the first N samples (sorted by id).
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportAttentionArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub limit: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::BuildVocab(a) => commands::build_vocab(&a),
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::ExportAttention(a) => commands::export_attention(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
