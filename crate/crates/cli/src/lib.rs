//! The `attnprobe` command line.
//!
//! Every subcommand writes its outputs plus a `run.json` record of the flags,
//! seeds and input digests that produced them.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod record;

pub use record::RunRecord;

#[derive(Debug, Parser)]
#[command(name = "attnprobe", version, about = "Score, categorize, map and ablate attention heads")]
pub struct Cli {
    /// Worker threads; results do not depend on it [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every head's globalness, verticality and diagonalness
    Score(ScoreArgs),
    /// Assign each head a category from its scores
    Categorize(CategorizeArgs),
    /// Build a phoneme relation map for one layer
    Prm(PrmArgs),
    /// Write a battery of synthetic attention heads with known categories
    SynthBattery(SynthBatteryArgs),
    /// Write a synthetic labeled feature dataset
    SynthData(SynthDataArgs),
    /// Run the encoder and dump attention and representations
    Forward(ForwardArgs),
    /// Train a linear frame probe
    ProbeTrain(ProbeTrainArgs),
    /// Evaluate a trained probe
    ProbeEval(ProbeEvalArgs),
    /// Mask the heads of one category cumulatively and record probe accuracy
    Ablate(AblateArgs),
    /// Summarize a scores table
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    /// Manifest whose entries all carry attention dumps
    #[arg(long, value_name = "PATH", conflicts_with = "attention")]
    pub manifest: Option<PathBuf>,
    /// Attention dump files (alternative to --manifest)
    #[arg(long, value_name = "PATH", num_args = 1..)]
    pub attention: Vec<PathBuf>,
    /// Utterances averaged per head [default: min(10, available)]
    #[arg(long, value_name = "N")]
    pub sample: Option<usize>,
    /// Seed for the utterance sample
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scores CSV to write
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CategorizeArgs {
    /// Scores CSV from `score`
    #[arg(long, value_name = "PATH", conflicts_with = "attention")]
    pub scores: Option<PathBuf>,
    /// Attention dump files to score over all utterances (alternative to --scores)
    #[arg(long, value_name = "PATH", num_args = 1..)]
    pub attention: Vec<PathBuf>,
    /// Known categories (`layer,head,category`) to check against
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,
    /// Scores CSV with the category column filled in
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PrmArgs {
    /// Manifest whose entries carry attention dumps and labels
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Layer to map (zero-based)
    #[arg(long)]
    pub layer: usize,
    /// Comma-separated heads to pool [default: all heads of the layer]
    #[arg(long, value_name = "H,H,...", value_delimiter = ',')]
    pub heads: Option<Vec<usize>>,
    /// Use only the first N utterances of the manifest
    #[arg(long, value_name = "N")]
    pub max_utterances: Option<usize>,
    /// Write rows as the attended-to phone instead of the attending one
    #[arg(long)]
    pub transpose: bool,
    /// Also write a grayscale PGM image next to the CSV
    #[arg(long)]
    pub pgm: bool,
    /// Relation map CSV to write (a `.mask.csv` is written beside it)
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthBatteryArgs {
    /// Frames per synthetic matrix
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
    /// Heads generated for each category
    #[arg(long, default_value_t = 12)]
    pub per_category: usize,
    /// Seed for pattern parameters and noise
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for battery.att and truth.csv
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Local,
    Harmony,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthDataArgs {
    /// Number of utterances
    #[arg(long, default_value_t = 20)]
    pub utterances: usize,
    /// Shortest utterance in frames
    #[arg(long, default_value_t = 40)]
    pub min_frames: usize,
    /// Longest utterance in frames
    #[arg(long, default_value_t = 80)]
    pub max_frames: usize,
    /// Inventory size, including sil and unk
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    /// Standard deviation of per-frame feature noise
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Label dependency structure
    #[arg(long, value_enum, default_value_t = ModeArg::Local)]
    pub mode: ModeArg,
    /// Trigger classes in harmony mode (comma-separated)
    #[arg(long, value_delimiter = ',', value_name = "C,C,...")]
    pub triggers: Vec<usize>,
    /// Dependent classes in harmony mode (comma-separated)
    #[arg(long, value_delimiter = ',', value_name = "C,C,...")]
    pub dependents: Vec<usize>,
    /// Dataset seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (features, labels, inventory.txt, manifest.toml)
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

/// Which encoder to run.
#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Model configuration file [default: built-in shape, feature dim from data]
    #[arg(long, value_name = "PATH")]
    pub model_config: Option<PathBuf>,
    /// WGT1 weights [default: initialized from --seed]
    #[arg(long, value_name = "PATH", requires = "model_config")]
    pub weights: Option<PathBuf>,
    /// Replace every head's attention with synthetic battery patterns assigned by --seed
    #[arg(long)]
    pub inject_battery: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    /// Gradient steps
    #[arg(long, default_value_t = 50_000)]
    pub steps: usize,
    /// Frames per mini-batch
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Learning rate
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    /// L2 penalty on probe weights
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ForwardArgs {
    /// Input manifest
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Heads to mask, as `layer:head` (comma-separated)
    #[arg(long, value_delimiter = ',', value_name = "L:H,...")]
    pub mask: Vec<attnprobe_core::HeadId>,
    /// Seed for weight initialization and battery assignment
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (per-utterance .att and .rep.fea, manifest.toml, model files)
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeTrainArgs {
    /// Labeled manifest
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Probe the input features directly instead of encoder outputs
    #[arg(long, conflicts_with_all = ["model_config", "weights", "inject_battery"])]
    pub raw: bool,
    /// Heads masked while training, as `layer:head` (comma-separated)
    #[arg(long, value_delimiter = ',', value_name = "L:H,...")]
    pub mask: Vec<attnprobe_core::HeadId>,
    /// Fraction of utterances used for training; the rest go to test.toml
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Train on every utterance and skip the split
    #[arg(long, conflicts_with = "split")]
    pub no_split: bool,
    #[command(flatten)]
    pub probe: ProbeArgs,
    /// Seed for the split, weight initialization, battery assignment and batches
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (probe.wgt, train.toml, test.toml, model files)
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeEvalArgs {
    /// Labeled manifest to evaluate on
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Trained probe (WGT1)
    #[arg(long, value_name = "PATH")]
    pub probe: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Evaluate on the input features directly
    #[arg(long, conflicts_with_all = ["model_config", "weights", "inject_battery"])]
    pub raw: bool,
    /// Heads to mask, as `layer:head` (comma-separated)
    #[arg(long, value_delimiter = ',', value_name = "L:H,...")]
    pub mask: Vec<attnprobe_core::HeadId>,
    /// Seed for weight initialization and battery assignment
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Name of the representation in the report row
    #[arg(long, default_value = "mini")]
    pub pretrain_id: String,
    /// Name of the labeled data in the report row
    #[arg(long, default_value = "synth")]
    pub finetune_id: String,
    /// Evaluation CSV (`pretrain,finetune,masked_heads,accuracy`)
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Also write the confusion matrix CSV
    #[arg(long, value_name = "PATH")]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    /// Test manifest
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Probe trained on unmasked representations
    #[arg(long, value_name = "PATH")]
    pub probe: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Category whose heads are masked
    #[arg(long)]
    pub category: attnprobe_core::Category,
    /// Categorized scores CSV [default: score the test set's own attention]
    #[arg(long, value_name = "PATH")]
    pub scores: Option<PathBuf>,
    /// Retrain the probe under every mask instead of reusing it
    #[arg(long, requires = "train_manifest")]
    pub retrain: bool,
    /// Training manifest for --retrain
    #[arg(long, value_name = "PATH")]
    pub train_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub probe_config: ProbeArgs,
    /// Seed for weight initialization, battery assignment and retraining
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Curve CSV to write
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Scores CSV; missing categories are computed
    #[arg(long, value_name = "PATH")]
    pub scores: PathBuf,
    /// Output directory (summary.csv, layer_counts.csv, heatmap_*.csv)
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

/// Exit status for an error: 2 for I/O failures, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<attnprobe_core::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATTNPROBE_LOG", "warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| commands::dispatch(cli.command)),
            Err(e) => Err(e.into()),
        },
        None => commands::dispatch(cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("attnprobe: error: {e:#}");
            exit_code(&e)
        }
    }
}
