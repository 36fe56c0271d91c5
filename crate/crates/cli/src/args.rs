use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use smart::eval::{FeatureSource, MetricMode, PhantomSet};
use smart::phantom::ShapeKind;

#[derive(Debug, Parser)]
#[command(name = "smart", version, about = "Semantic-attention guided masked pretraining for 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Downstream evaluation of a pretrained checkpoint.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Runs the command recorded in a manifest again into a new directory.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PretrainArgs {
    /// Built-in defaults to start from: desk, paper or tiny.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    /// Sectioned key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Total steps; warmup keeps its share of the run unless set explicitly.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub dtype: Precision,
    /// Continue from a checkpoint (its stored configuration is used).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCommand {
    /// Intra/inter class distances of frozen features.
    Cluster(ClusterArgs),
    /// Logistic probing of frozen features.
    Probe(ProbeArgs),
    /// Supervised fine-tuning of the whole encoder.
    Finetune(FinetuneArgs),
    /// Zero-shot localization by thresholding attention.
    Localize(LocalizeArgs),
    /// Exports per-voxel attention volumes.
    Attention(AttentionArgs),
    /// 2D projection of frozen features.
    Plot(PlotArgs),
}

impl EvalCommand {
    pub fn name(&self) -> &'static str {
        match self {
            EvalCommand::Cluster(_) => "cluster",
            EvalCommand::Probe(_) => "probe",
            EvalCommand::Finetune(_) => "finetune",
            EvalCommand::Localize(_) => "localize",
            EvalCommand::Attention(_) => "attention",
            EvalCommand::Plot(_) => "plot",
        }
    }

    pub fn common(&self) -> &CommonEval {
        match self {
            EvalCommand::Cluster(a) => &a.common,
            EvalCommand::Probe(a) => &a.common,
            EvalCommand::Finetune(a) => &a.common,
            EvalCommand::Localize(a) => &a.common,
            EvalCommand::Attention(a) => &a.common,
            EvalCommand::Plot(a) => &a.common,
        }
    }

    pub fn common_mut(&mut self) -> &mut CommonEval {
        match self {
            EvalCommand::Cluster(a) => &mut a.common,
            EvalCommand::Probe(a) => &mut a.common,
            EvalCommand::Finetune(a) => &mut a.common,
            EvalCommand::Localize(a) => &mut a.common,
            EvalCommand::Attention(a) => &mut a.common,
            EvalCommand::Plot(a) => &mut a.common,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CommonEval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of volumes (raw or NIfTI); phantoms are generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub phantoms: PhantomArgs,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub dtype: Precision,
    /// Skip per-crop intensity normalization.
    #[arg(long)]
    pub raw_intensity: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PhantomArgs {
    /// Number of generated phantoms.
    #[arg(long, default_value_t = 30)]
    pub phantoms: usize,
    /// Comma-separated structure classes, one class per phantom in turn.
    #[arg(long, value_delimiter = ',', default_value = "sphere,box,shell")]
    pub classes: Vec<ShapeArg>,
    #[arg(long, default_value_t = 32)]
    pub grid: usize,
    #[arg(long, default_value_t = 4.0)]
    pub radius_min: f64,
    #[arg(long, default_value_t = 7.0)]
    pub radius_max: f64,
    #[arg(long, default_value_t = 1000)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeArg {
    Sphere,
    Box,
    Shell,
}

impl From<ShapeArg> for ShapeKind {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Sphere => ShapeKind::Sphere,
            ShapeArg::Box => ShapeKind::Box,
            ShapeArg::Shell => ShapeKind::Shell,
        }
    }
}

impl PhantomArgs {
    pub fn set(&self) -> PhantomSet {
        PhantomSet {
            count: self.phantoms,
            classes: self.classes.iter().map(|&c| c.into()).collect(),
            grid_size: self.grid,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            contrast: 1.0,
            seed: self.data_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceArg {
    Cls,
    GlobalPool,
}

impl From<SourceArg> for FeatureSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Cls => FeatureSource::Cls,
            SourceArg::GlobalPool => FeatureSource::GlobalPool,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Threshold,
    Average,
}

impl From<ModeArg> for MetricMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Threshold => MetricMode::Threshold,
            ModeArg::Average => MetricMode::Average,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub common: CommonEval,
    #[arg(long, value_enum, default_value_t = SourceArg::Cls)]
    pub source: SourceArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: CommonEval,
    #[arg(long, value_enum, default_value_t = SourceArg::Cls)]
    pub source: SourceArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Threshold)]
    pub metric_mode: ModeArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: CommonEval,
    #[arg(long, default_value_t = 40)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    /// Share of the training split to use, e.g. 0.25 or 0.5.
    #[arg(long, default_value_t = 1.0)]
    pub data_fraction: f64,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Threshold)]
    pub metric_mode: ModeArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub common: CommonEval,
    #[arg(long, default_value_t = 90.0)]
    pub percentile: f64,
    /// Reject volumes larger than the model input instead of tiling them.
    #[arg(long)]
    pub no_tiling: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttentionArgs {
    #[command(flatten)]
    pub common: CommonEval,
    #[arg(long)]
    pub no_tiling: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PlotArgs {
    #[command(flatten)]
    pub common: CommonEval,
    #[arg(long, value_enum, default_value_t = SourceArg::Cls)]
    pub source: SourceArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
