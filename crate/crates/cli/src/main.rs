//! `finetag`: convert annotations, fit the projection, train, evaluate.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use finetag::data::DataError;
use finetag::features::FeatureError;
use finetag::model::ModelError;
use finetag::projection::ProjectionError;
use finetag::trainer::TrainError;

#[derive(Parser, Debug)]
#[command(
    name = "finetag",
    version,
    about = "Bilinear attribute-classification head: data conversion, training and evaluation"
)]
struct Cli {
    /// Worker threads for batch computation; 1 runs everything sequentially.
    #[arg(long, global = true, env = "FINETAG_THREADS")]
    threads: Option<usize>,

    /// Print failures as a JSON object on the last line of stderr.
    #[arg(long, global = true)]
    json_errors: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the label matrix, split and vocabulary from CUB-200-2011 text files.
    Convert(ConvertArgs),
    /// Fit the PCA or FastICA initializer of the 1x1 projection.
    FitProjection(FitProjectionArgs),
    /// Train the head with a pairwise ranking loss.
    Train(TrainArgs),
    /// Evaluate a checkpoint: AVGPREC, per-label AP and weighted MAP.
    Eval(EvalArgs),
    /// Compare head and VGG16 fully-connected parameter counts.
    ParamCount(ParamCountArgs),
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Directory holding images.txt, train_test_split.txt, attributes.txt and
    /// attributes/image_attribute_labels.txt.
    #[arg(long)]
    pub cub_dir: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Images moved from the official test partition to validation.
    #[arg(long, default_value_t = 700)]
    pub val_size: usize,
    /// Seed for the validation draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Require the certainty and time columns in the annotation file.
    #[arg(long)]
    pub strict: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodArg {
    Ica,
    Pca,
}

#[derive(Args, Debug)]
pub struct FitProjectionArgs {
    /// Feature store (FTNS).
    #[arg(long)]
    pub features: PathBuf,
    /// Split JSON written by `convert`; locations are sampled from training images.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Ica)]
    pub method: MethodArg,
    /// Projection components K.
    #[arg(long, default_value_t = 20)]
    pub components: usize,
    /// Spatial locations sampled from every training map.
    #[arg(long, default_value_t = 50)]
    pub per_image: usize,
    /// Seed for location sampling and the FastICA start.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// FastICA iteration limit.
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    /// FastICA convergence tolerance.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Output FTPJ file; diagnostics and manifest are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossArg {
    Smooth,
    Hinge,
    HingeSum,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerArg {
    Adam,
    Momentum,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Feature store (FTNS).
    #[arg(long)]
    pub features: PathBuf,
    /// Label matrix (FTLM).
    #[arg(long)]
    pub labels: PathBuf,
    /// Split JSON written by `convert`.
    #[arg(long)]
    pub split: PathBuf,
    /// Projection initializer (FTPJ) from `fit-projection`.
    #[arg(long)]
    pub projection: PathBuf,
    #[arg(long, value_enum, default_value_t = LossArg::Smooth)]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// Defaults to 1e-5 for Adam and 1e-4 for momentum.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Seed for parameter initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the training order fixed instead of reshuffling every epoch.
    #[arg(long)]
    pub no_shuffle: bool,
    /// Signed square root and L2 normalization after pooling.
    #[arg(long)]
    pub bcnn_normalize: bool,
    /// Precision of stored checkpoints.
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    pub dtype: DtypeArg,
    /// Directory for checkpoints, history.jsonl, final.ftmd and the manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubsetArg {
    Train,
    Val,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TieArg {
    Index,
    Optimistic,
    Pessimistic,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightsArg {
    /// Positive counts over the evaluated images.
    Eval,
    /// Positive counts over every image in the label matrix.
    Dataset,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model checkpoint (FTMD).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature store (FTNS).
    #[arg(long)]
    pub features: PathBuf,
    /// Label matrix (FTLM).
    #[arg(long)]
    pub labels: PathBuf,
    /// Split JSON written by `convert`.
    #[arg(long = "split-file")]
    pub split_file: PathBuf,
    /// Which part of the split to evaluate.
    #[arg(long, value_enum, default_value_t = SubsetArg::Test)]
    pub split: SubsetArg,
    /// Vocabulary JSON; defaults to vocabulary.json beside the label matrix.
    #[arg(long)]
    pub vocabulary: Option<PathBuf>,
    /// How equal scores are ordered when ranking.
    #[arg(long, value_enum, default_value_t = TieArg::Index)]
    pub tie_rule: TieArg,
    #[arg(long, value_enum, default_value_t = WeightsArg::Eval)]
    pub weights: WeightsArg,
    /// Directory for summary.json and the CSV reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParamCountArgs {
    /// Backbone channels C.
    #[arg(long, default_value_t = 512)]
    pub channels: usize,
    /// Projection components K.
    #[arg(long, default_value_t = 20)]
    pub components: usize,
    /// Number of attributes N.
    #[arg(long, default_value_t = 312)]
    pub num_classes: usize,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// Failures caused by bad arguments or inconsistent inputs rather than by the
/// run itself.
#[derive(Debug, thiserror::Error)]
pub enum UsageError {
    #[error("missing input file {0}")]
    MissingFile(PathBuf),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("{0}")]
    Invalid(String),
}

fn is_validation(err: &anyhow::Error) -> bool {
    if err.is::<UsageError>() {
        return true;
    }
    if let Some(e) = err.downcast_ref::<DataError>() {
        return !matches!(e, DataError::Io(_));
    }
    if let Some(e) = err.downcast_ref::<ProjectionError>() {
        return matches!(
            e,
            ProjectionError::RankDeficient { .. }
                | ProjectionError::NoComponents
                | ProjectionError::PerImageTooLarge { .. }
                | ProjectionError::ShapeMismatch(_)
                | ProjectionError::InvalidOption(_)
                | ProjectionError::Features(FeatureError::MissingId(_))
        );
    }
    if let Some(e) = err.downcast_ref::<TrainError>() {
        return matches!(
            e,
            TrainError::InvalidConfig(_) | TrainError::DimensionMismatch(_) | TrainError::Data(_)
        );
    }
    if let Some(e) = err.downcast_ref::<ModelError>() {
        return matches!(e, ModelError::InvalidConfig(_) | ModelError::DimMismatch { .. });
    }
    if let Some(e) = err.downcast_ref::<FeatureError>() {
        return matches!(e, FeatureError::MissingId(_));
    }
    false
}

fn report(err: &anyhow::Error, code: u8, json: bool) {
    if json {
        let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
        let body = serde_json::json!({
            "error": err.to_string(),
            "causes": causes,
            "exit_code": code,
        });
        eprintln!("{body}");
    } else {
        eprintln!("error: {err:#}");
    }
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                // --help / --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                report(&anyhow::anyhow!(e.to_string().trim().to_string()), 2, true);
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    match run(cli.command, cli.threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = if is_validation(&err) { 2 } else { 1 };
            report(&err, code, cli.json_errors);
            ExitCode::from(code)
        }
    }
}

fn run(command: Command, threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(UsageError::Invalid("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let exec = match threads {
        Some(1) => finetag::Execution::Sequential,
        _ => finetag::Execution::Parallel,
    };
    let ctx = commands::Context { threads, exec };
    match command {
        Command::Convert(args) => commands::convert(&ctx, args),
        Command::FitProjection(args) => commands::fit_projection(&ctx, args),
        Command::Train(args) => commands::train(&ctx, args),
        Command::Eval(args) => commands::eval(&ctx, args),
        Command::ParamCount(args) => commands::param_count(args),
    }
}
