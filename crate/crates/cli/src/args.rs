use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "introlm", version, about = "Prefill-time capability scoring with [CPX] introspection")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Global {
    /// Root directory for all artifacts.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Experiment seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker thread cap.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Flat TOML file of `flag = value` defaults; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate prompts, optionally label them with a backbone, and split.
    GenData(GenDataArgs),
    /// Train the backbone or the introspection parameters.
    Train(TrainArgs),
    /// Score a split and report ROC-AUC / PR-AUC with curve CSVs.
    Eval(EvalArgs),
    /// Sweep routing thresholds into a trade-off CSV and SVG.
    Sweep(SweepArgs),
    /// Generation-invariance, cache-purity and mask-locality suites.
    CheckInvariance(CheckArgs),
    /// Train and evaluate introspection at several layer prefixes.
    LayerSweep(LayerSweepArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::CheckInvariance(_) => "check-invariance",
            Command::LayerSweep(_) => "layer-sweep",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GenDataArgs {
    /// Dataset name; files are `data/<name>*.jsonl`.
    #[arg(long, default_value = "task")]
    pub name: String,
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub depth_min: usize,
    #[arg(long, default_value_t = 6)]
    pub depth_max: usize,
    #[arg(long, default_value_t = 8)]
    pub preamble_max: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    /// Backbone checkpoint used for labelling; without it prompts stay unlabelled.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Failure rate the depth mix is calibrated to (labelled runs only).
    #[arg(long, default_value_t = 0.25)]
    pub target_failure: f64,
    /// Prompts per depth used to measure accuracy before calibration.
    #[arg(long, default_value_t = 200)]
    pub probe_per_depth: usize,
    /// Skip calibration and draw depths uniformly.
    #[arg(long)]
    pub uniform: bool,
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Backbone,
    FrozenCpx,
    TokenLora,
    BackboneOnly,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregatorArg {
    Mean,
    Last,
}

/// Flags shared by every introspection training run.
#[derive(Args, Debug, Clone, Serialize)]
pub struct IntroFlags {
    /// LoRA targets: a preset (none, ffn, attn, full) or a comma list of
    /// projections. Defaults to `full` in token-lora mode.
    #[arg(long)]
    pub lora_targets: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 16.0)]
    pub alpha: f64,
    /// Permit adapters on k/v.
    #[arg(long)]
    pub allow_kv: bool,
    #[arg(long, default_value_t = 1)]
    pub n_cpx: usize,
    #[arg(long, value_enum, default_value_t = AggregatorArg::Mean)]
    pub aggregator: AggregatorArg,
    /// Feed the head the raw residual instead of the final-norm output.
    #[arg(long)]
    pub no_post_norm: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OptimFlags {
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long)]
    pub lr_head: Option<f64>,
    #[arg(long)]
    pub lr_cpx: Option<f64>,
    #[arg(long)]
    pub lr_lora: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub warmup_ratio: f64,
    #[arg(long, default_value_t = 0.3)]
    pub max_grad_norm: f64,
    #[arg(long, default_value_t = 0.002)]
    pub weight_decay: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Training split (JSONL).
    #[arg(long)]
    pub train: PathBuf,
    /// Validation split (JSONL).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Frozen backbone checkpoint (introspection modes).
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Backbone checkpoint to continue from (backbone mode).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Checkpoint name; defaults to the mode name.
    #[arg(long)]
    pub name: Option<String>,
    /// 1-based layer prefix for introspection; all layers by default.
    #[arg(long)]
    pub layer: Option<usize>,
    #[command(flatten)]
    pub intro: IntroFlags,
    #[command(flatten)]
    pub optim: OptimFlags,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 192)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 256)]
    pub max_seq_len: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    Introlm,
    BackboneOnly,
    /// Read `id,score,label` rows from `--scores`.
    File,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value_t = Scorer::Introlm)]
    pub scorer: Scorer,
    /// Labelled split to score (model scorers).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Introspection (or backbone-only head) checkpoint.
    #[arg(long)]
    pub intro: Option<PathBuf>,
    /// Scores CSV for the file scorer.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Report name; defaults to the scorer name.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SweepArgs {
    /// Scores CSV (`id,score,label`) of the routed scorer.
    #[arg(long)]
    pub scores: PathBuf,
    /// Extra `label=path` score files drawn as additional series.
    #[arg(long)]
    pub compare: Vec<String>,
    /// TOML latency profile with ttft_small, tpot_small, ttft_large,
    /// tpot_large and mean_output_len.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Threshold grid file, one value per line; defaults to every distinct score.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub large_accuracy: f64,
    #[arg(long, default_value = "sweep")]
    pub name: String,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CheckArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub intro: PathBuf,
    /// Random prompts per suite.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
    #[arg(long, default_value_t = 48)]
    pub max_prompt_len: usize,
    /// Negative control: apply adapters at every position.
    #[arg(long)]
    pub sabotage: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct LayerSweepArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Prefix depths as percentages of the layer count.
    #[arg(long, value_delimiter = ',', default_value = "50,75,100")]
    pub prefixes: Vec<u32>,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[command(flatten)]
    pub intro: IntroFlags,
    #[command(flatten)]
    pub optim: OptimFlags,
    #[arg(long, default_value = "layer_sweep")]
    pub name: String,
}
