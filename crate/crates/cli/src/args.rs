use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use molgap::train::FoldSelection;
use molgap::{ModelConfig, ModelKind, Profile, SpatialMode, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "molgap", version, about = "HOMO-LUMO gap regression with graph transformers and ExpC*")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate a synthetic molecule dataset.
    Synth(SynthArgs),
    /// Check a dataset file and report its size.
    Validate(ValidateArgs),
    /// Precompute model inputs into a binary cache.
    Featurize(FeaturizeArgs),
    /// Train one model on one fold (or on all data).
    Train(TrainArgs),
    /// Mean absolute error of a checkpoint.
    Eval(EvalArgs),
    /// Compare model gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Weighted ensemble predictions from a spec file.
    Ensemble(EnsembleArgs),
    /// Number of trainable parameters of a named configuration.
    CountParams(CountParamsArgs),
    /// Re-run a recorded command and compare its outputs bit for bit.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialArg {
    EuclideanRbf,
    Hop,
}

impl From<SpatialArg> for SpatialMode {
    fn from(a: SpatialArg) -> Self {
        match a {
            SpatialArg::EuclideanRbf => SpatialMode::EuclideanRbf,
            SpatialArg::Hop => SpatialMode::Hop,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 3)]
    pub min_atoms: usize,
    #[arg(long, default_value_t = 10)]
    pub max_atoms: usize,
    #[arg(long, default_value_t = 0.3)]
    pub ring_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "euclidean-rbf")]
    pub spatial_mode: SpatialArg,
    /// Defaults to the chosen profile's kernel count (256 for paper).
    #[arg(long)]
    pub rbf_kernels: Option<usize>,
    #[arg(long)]
    pub rbf_min: Option<f64>,
    #[arg(long)]
    pub rbf_max: Option<f64>,
    /// Profile whose Graphormer RBF supplies defaults for the flags above.
    #[arg(long, default_value = "paper")]
    pub profile: Profile,
    #[arg(long, env = "MOLGAP_WORKERS", default_value_t = 1)]
    pub workers: usize,
}

/// Complete model and optimization settings of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: ModelKind,
    #[arg(long, default_value = "mini")]
    pub profile: Profile,
    /// Fold index to hold out, or `all` to train on everything.
    #[arg(long, default_value = "0")]
    pub fold: FoldSelection,
    #[arg(long, default_value_t = 8)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the fold assignment, shared by every run of an ensemble.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Molecule dataset (JSON lines).
    #[arg(long, conflicts_with = "cache", required_unless_present = "cache")]
    pub data: Option<PathBuf>,
    /// Featurized cache from `molgap featurize`.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Checkpoint path; defaults to runs/<model>-<fold>-seed<seed>.ckpt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with `model` and `train` sections replacing the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "MOLGAP_WORKERS", default_value_t = 1)]
    pub workers: usize,
    /// Required for the paper profile, which needs days of accelerator time.
    #[arg(long)]
    pub i_have_the_compute: bool,
    #[arg(skip)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<RunConfig>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "cache", required_unless_present = "cache")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Evaluate only this fold's validation split.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// JSON report path; defaults to <checkpoint>.eval.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "MOLGAP_WORKERS", default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub model: ModelKind,
    #[arg(long, default_value = "mini")]
    pub profile: Profile,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub graphs: usize,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// JSON report path; defaults to runs/gradcheck-<model>-<profile>-seed<seed>.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub i_have_the_compute: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Tab-separated `id<TAB>prediction` lines.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "MOLGAP_WORKERS", default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CountParamsArgs {
    #[arg(long)]
    pub model: ModelKind,
    #[arg(long, default_value = "paper")]
    pub profile: Profile,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}
