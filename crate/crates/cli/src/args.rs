use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Bitemporal change detection: inference, evaluation, analysis, training.
#[derive(Debug, Parser)]
#[command(name = "cdlite", version)]
pub struct Cli {
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Predict a change mask for one image pair.
    Infer(InferArgs),
    /// Train the toy configuration on seeded synthetic data.
    TrainToy(TrainToyArgs),
    /// Score a directory of predicted masks against ground truth.
    Eval(EvalArgs),
    /// Region statistics of a directory of masks.
    Analyze(AnalyzeArgs),
    /// Parameter and FLOP report of a configuration.
    Params(ParamsArgs),
    /// Train every ablation arm on one dataset and compare.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Model config JSON file or preset name (toy, sysu, cdd, whu, levir_plus).
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub t1: PathBuf,
    #[arg(long)]
    pub t2: PathBuf,
    /// Binary mask output (0/255 PGM).
    #[arg(long)]
    pub out: PathBuf,
    /// Probability map output (PGM, 0..255).
    #[arg(long)]
    pub prob_out: Option<PathBuf>,
    /// Ground-truth mask; enables `--diff-out`.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// TP/FP/FN colour map (PPM); needs `--gt`.
    #[arg(long, requires = "gt")]
    pub diff_out: Option<PathBuf>,
    /// Overrides the config's decision threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Model config JSON file or preset name.
    #[arg(long, default_value = "toy")]
    pub config: String,
    /// Synthetic dataset spec JSON; defaults to the built-in spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Directory for weights, configs and the epoch trace.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also persist the generated dataset under `<out-dir>/data`.
    #[arg(long)]
    pub save_data: bool,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub val_samples: usize,
    /// Stop once validation F1 reaches this value.
    #[arg(long)]
    pub target_f1: Option<f64>,
    /// Seed for weight init and batch order.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Write one TP/FP/FN colour map per file into this directory.
    #[arg(long)]
    pub diff_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub masks: PathBuf,
    /// Region count separating "few" from "many" samples.
    #[arg(long, default_value_t = 4)]
    pub threshold: usize,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Model config JSON file or preset name.
    #[arg(long)]
    pub config: String,
    /// Square input side for the FLOP estimate.
    #[arg(long, default_value_t = 256)]
    pub input: usize,
    /// Optional JSON copy of the report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Ablation plan JSON: optional `model`, `train`, `data` and `arms`.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Overrides the plan's training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}
