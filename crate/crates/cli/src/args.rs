use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "navmem", version, about = "Multi-goal gridworld navigation with a forgetting topological memory")]
#[command(args_override_self = true)]
pub struct Cli {
    /// JSON object of flag values (keys are long flag names); command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate worlds and a validated episode dataset.
    Generate(GenerateArgs),
    /// Imitation-train a model against the shortest-path teacher.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Evaluate over a grid of forgetting fractions, grouped by difficulty.
    SweepP(SweepArgs),
    /// Evaluate the memory-toggle grid.
    Ablate(AblateArgs),
    /// Export node-distance and long-term-variation tables from a recorded run.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WmArg {
    Gatv2,
    Gcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyArg {
    Greedy,
    Sample,
    Uniform,
    /// The shortest-path teacher; an oracle reference run.
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceArg {
    Geodesic,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

fn parse_size(s: &str) -> Result<Size, String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok(Size { width: p(w)?, height: p(h)? })
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1)"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 10)]
    pub worlds: usize,
    #[arg(long, default_value = "15x15", value_parser = parse_size)]
    pub size: Size,
    /// Obstacle density in [0, 0.4].
    #[arg(long, default_value_t = 0.2)]
    pub density: f64,
    /// Goals per episode, 1 to 4.
    #[arg(long, default_value_t = 1)]
    pub goals: usize,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the world files, dataset.json and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Output directory for model.ckpt, its sidecar, last.ckpt and train_log.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub updates: usize,
    /// Episodes per update.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Gradient-norm clip.
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    /// Embedding width.
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// LSTM hidden width.
    #[arg(long, default_value_t = 64)]
    pub d_h: usize,
    #[arg(long, value_enum, default_value_t = WmArg::Gatv2)]
    pub wm: WmArg,
    /// Attention heads for the GATv2 working memory.
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Long-term memory during rollouts and held-out evaluation.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub ltm: Toggle,
    #[arg(long, default_value = "15x15", value_parser = parse_size)]
    pub size: Size,
    #[arg(long, default_value_t = 0.2)]
    pub density: f64,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 50)]
    pub eval_episodes: usize,
    #[arg(long, default_value_t = 10)]
    pub eval_worlds: usize,
    /// Forgetting during held-out evaluation.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub forget: Toggle,
    #[arg(long, default_value_t = 0.2, value_parser = parse_fraction)]
    pub p: f64,
    /// Seed of the frozen observation projection.
    #[arg(long, default_value_t = navmem::encoders::DEFAULT_PROJECTION_SEED)]
    pub projection_seed: u64,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct EvalOptions {
    /// Forgetting fraction.
    #[arg(long, default_value_t = 0.2, value_parser = parse_fraction)]
    pub p: f64,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub forget: Toggle,
    /// Long-term memory; defaults to the checkpoint's training setting.
    #[arg(long, value_enum)]
    pub ltm: Option<Toggle>,
    /// Expected working-memory variant; must match the checkpoint.
    #[arg(long, value_enum)]
    pub wm: Option<WmArg>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::Greedy)]
    pub policy: PolicyArg,
    /// Seed for sampled and uniform policies.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub step_budget: usize,
    /// Success radius in meters.
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    /// Count a stop outside the radius as failure (off: keep navigating).
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub strict_stop: Toggle,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub opts: EvalOptions,
    /// Record per-node attention scores in the trajectory log.
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    pub scores: Toggle,
    /// Write per-step map snapshots for analysis.
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    pub snapshots: Toggle,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// One or more datasets, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dataset: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8", value_parser = parse_fraction)]
    pub p_grid: Vec<f64>,
    #[command(flatten)]
    pub opts: EvalOptions,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    /// Checkpoint trained with the GATv2 working memory.
    #[arg(long)]
    pub ckpt_gatv2: PathBuf,
    /// Checkpoint trained with the GCN working memory.
    #[arg(long)]
    pub ckpt_gcn: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub opts: EvalOptions,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Trajectory JSONL written by eval.
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Snapshot JSONL written by eval with --snapshots on.
    #[arg(long)]
    pub snapshots: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DistanceArg::Geodesic)]
    pub distance: DistanceArg,
    /// Only emit distance rows at steps where some node is forgotten.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub only_forgetting: Toggle,
    /// Output directory for distance.csv, distance_summary.csv and ltm_delta.csv.
    #[arg(long)]
    pub out: PathBuf,
}
