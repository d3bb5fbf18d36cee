//! Command-line surface. Every argument struct also (de)serializes, so a run
//! can be saved as JSON and replayed with `--config`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use inner_core::dataio::ImputeMode;
use inner_core::nn::{BiasInit, InitScheme, WeightInit};
use inner_core::{OptimizerKind, Scenario};

#[derive(Debug, Parser)]
#[command(name = "inner", version, about = "Interpretable neural-network regression")]
pub struct Cli {
    /// Global seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// JSON run configuration; its values override flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Omit to replay a saved `run_config.json` given by `--config`.
    #[command(subcommand)]
    pub command: Option<Command>,
}

/// Everything that determines a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic cohort and its ground truth.
    Simulate(SimulateArgs),
    /// Train a model (or a balanced ensemble) on a cohort CSV.
    Train(TrainArgs),
    /// Score a trained model on a labeled cohort.
    Evaluate(EvaluateArgs),
    /// Grid-search the learning rate.
    Tune(TuneArgs),
    /// Replicated simulation benchmark against the logistic baseline.
    Benchmark(BenchmarkArgs),
    /// Local-FDR subgroups, risk curves and covariate R².
    Subgroup(SubgroupArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioArg {
    Correct,
    Misspec,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Correct => Scenario::CorrectModel,
            ScenarioArg::Misspec => Scenario::Misspecified,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Sgd,
    Adagrad,
    Adadelta,
    Adam,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adagrad => OptimizerKind::Adagrad,
            OptimizerArg::Adadelta => OptimizerKind::Adadelta,
            OptimizerArg::Adam => OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    GlorotUniform,
    GlorotNormal,
    HeUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasArg {
    Zeros,
    Ones,
}

pub fn init_scheme(init: InitArg, bias: BiasArg) -> InitScheme {
    let weights = match init {
        InitArg::GlorotUniform => WeightInit::GlorotUniform,
        InitArg::GlorotNormal => WeightInit::GlorotNormal,
        InitArg::HeUniform => WeightInit::HeUniform,
    };
    let bias = match bias {
        BiasArg::Zeros => BiasInit::Zeros,
        BiasArg::Ones => BiasInit::Ones,
    };
    InitScheme::new(weights, bias)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineArg {
    /// One-layer networks: ordinary logistic regression with pain interactions.
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputeArg {
    TrainFitted,
    PerSplit,
}

impl From<ImputeArg> for ImputeMode {
    fn from(m: ImputeArg) -> Self {
        match m {
            ImputeArg::TrainFitted => ImputeMode::TrainFitted,
            ImputeArg::PerSplit => ImputeMode::PerSplit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockArg {
    /// The single cell given by --p, --n, --snr and --noise.
    Cell,
    /// SNR 0.2, 0.8, 3.2 at n = 40,000, p = 16.
    Snr,
    /// 8, 12, 16 noise covariates at SNR 3.2.
    Noise,
    /// p in {8, 16, 18} by n in {5,000, 10,000, 20,000}.
    Size,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "correct")]
    pub scenario: ScenarioArg,
    /// Number of subjects.
    #[arg(long, default_value_t = 5_000)]
    pub n: usize,
    /// Signal covariates.
    #[arg(long, default_value_t = 8)]
    pub p: usize,
    /// Noise covariates appended after the signal ones.
    #[arg(long, default_value_t = 0)]
    pub noise: usize,
    #[arg(long, default_value_t = 3.2)]
    pub snr: f64,
    /// Euclidean length of the true coefficient vectors.
    #[arg(long, default_value_t = 2.5)]
    pub coef_norm: f64,
    /// Monte Carlo sample size for the scale calibration.
    #[arg(long, default_value_t = 40_000)]
    pub calib_size: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Layer widths after the input, ending in the single output unit.
    #[arg(long, value_delimiter = ',', default_value = "250,125,1")]
    pub arch: Vec<usize>,
    /// Train a baseline instead of INNER networks.
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    #[arg(long, value_enum, default_value = "glorot-uniform")]
    pub init: InitArg,
    #[arg(long, value_enum, default_value = "zeros")]
    pub bias: BiasArg,
    /// Dropout rate on every hidden layer.
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainingArgs {
    #[arg(long, value_enum, default_value = "sgd")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Stop once validation loss exceeds training loss by this much.
    #[arg(long, default_value_t = 0.01)]
    pub gap_delta: f64,
    /// Disable the gap stopping rule.
    #[arg(long)]
    pub no_gap_stop: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Cohort CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Covariate schema JSON. Without it the CSV must use the simulate
    /// layout: label `y`, pain `x`, every other column continuous.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Share of subjects held out as the validation split.
    #[arg(long, default_value_t = 0.3)]
    pub validation_fraction: f64,
    #[arg(long, value_enum, default_value = "train-fitted")]
    pub impute: ImputeArg,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Train a balanced-subsampling ensemble of this many models.
    #[arg(long, num_args = 0..=1, default_missing_value = "5")]
    pub ensemble: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Model JSON written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled cohort CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Transform sidecar; defaults to `transform.json` next to the model.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.2309")]
    pub thresholds: Vec<f64>,
    #[arg(long, value_enum, default_value = "train-fitted")]
    pub impute: ImputeArg,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Learning rates to try (default: 20 points from 0.005 to 0.1).
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchmarkArgs {
    #[arg(long, value_enum, default_value = "correct")]
    pub scenario: ScenarioArg,
    #[arg(long, value_enum, default_value = "cell")]
    pub block: BlockArg,
    #[arg(long, default_value_t = 8)]
    pub p: usize,
    #[arg(long, default_value_t = 5_000)]
    pub n: usize,
    #[arg(long, default_value_t = 3.2)]
    pub snr: f64,
    #[arg(long, default_value_t = 0)]
    pub noise: usize,
    /// Replications per cell.
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Hidden widths of both networks.
    #[arg(long, value_delimiter = ',', default_value = "64,32")]
    pub hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "sgd")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Gap stopping threshold; off unless given.
    #[arg(long)]
    pub gap_delta: Option<f64>,
    #[arg(long, value_enum, default_value = "glorot-uniform")]
    pub init: InitArg,
    #[arg(long, value_enum, default_value = "zeros")]
    pub bias: BiasArg,
    #[arg(long, default_value_t = 2.5)]
    pub coef_norm: f64,
    #[arg(long, default_value_t = 40_000)]
    pub calib_size: usize,
    /// Skip the INNER fits and run only the logistic baseline.
    #[arg(long)]
    pub logistic_only: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SubgroupArgs {
    /// Single-model JSON written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub transform: Option<PathBuf>,
    /// Local-FDR cutoff.
    #[arg(long, default_value_t = 0.2)]
    pub q: f64,
}
