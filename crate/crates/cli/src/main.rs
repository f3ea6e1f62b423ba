//! `dvt`: every pipeline stage and metric behind one executable.
//!
//! Exit codes: 0 success, 1 contract, usage or config error, 2 I/O or
//! format error. Logs go to standard output as space-separated `key=value`
//! pairs, one event per line, and carry no timing so two runs with the same
//! seed print the same bytes.

mod commands;
mod log;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dvt_core::config::RunConfig;
use dvt_core::Error;

#[derive(Debug, Parser)]
#[command(name = "dvt", version, about = "Feature-map denoising for vision transformers")]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Built-in profile the config starts from.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Full)]
    pub profile: Profile,

    /// `key = value` config file applied on top of the profile [default: none].
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config key, after the file; repeatable [default: none].
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Full-scale hyperparameters for 768-channel ViT features.
    Full,
    /// Small synthetic maps that run in minutes on one core.
    Desk,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ViewSet with its known decomposition.
    Synth(SynthArgs),
    /// Write a view plan for the feature extractor.
    PlanViews(PlanArgs),
    /// Stage one: fit the per-image decomposition to a ViewSet.
    Denoise(DenoiseArgs),
    /// Stage two: train the single-block denoiser on (raw, clean) pairs.
    TrainDenoiser(TrainArgs),
    /// Run a trained denoiser over feature maps.
    Apply(ApplyArgs),
    /// Measurements.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Render feature maps to PPM images.
    #[command(subcommand)]
    Viz(VizCommand),
    /// Print the effective config in file syntax.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Build a labeled scene with `eval.n_classes` regions.
    #[arg(long, default_value_t = false)]
    pub labeled: bool,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Output plan file.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Original image height in pixels.
    #[arg(long, default_value_t = 518)]
    pub height: u32,
    /// Original image width in pixels.
    #[arg(long, default_value_t = 518)]
    pub width: u32,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// ViewSet DVTF file.
    #[arg(long, value_name = "PATH")]
    pub views: PathBuf,
    /// Output directory for clean, artifact, checkpoint and metrics files.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Directory written by `synth`; recovery scores are logged [default: none].
    #[arg(long, value_name = "DIR")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Raw feature maps (FeatureMap, or ViewSet with an identity view); repeatable.
    #[arg(long, value_name = "PATH", required = true)]
    pub raw: Vec<PathBuf>,
    /// Clean targets, one per raw input, in the same order; repeatable.
    #[arg(long, value_name = "PATH", required = true)]
    pub clean: Vec<PathBuf>,
    /// Output checkpoint.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    /// Denoiser checkpoint from `train-denoiser`.
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// FeatureMap or ViewSet; a ViewSet is denoised view by view.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Output file of the same record kind as the input.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Position MIC of each feature map.
    Mic(MicArgs),
    /// KNN segmentation mIoU against a bank of labeled maps.
    Knn(KnnArgs),
    /// The F, F+G and F+G+residual reconstructions of a stage-one model.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct MicArgs {
    /// Feature maps to score; repeatable.
    #[arg(long, value_name = "PATH", required = true)]
    pub input: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    /// Bank feature maps; repeatable.
    #[arg(long, value_name = "PATH", required = true)]
    pub train_features: Vec<PathBuf>,
    /// Bank label maps, one per bank feature map; repeatable.
    #[arg(long, value_name = "PATH", required = true)]
    pub train_labels: Vec<PathBuf>,
    /// Feature maps to segment; repeatable.
    #[arg(long, value_name = "PATH", required = true)]
    pub test_features: Vec<PathBuf>,
    /// Ground truth, one per test feature map; repeatable.
    #[arg(long, value_name = "PATH", required = true)]
    pub test_labels: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    /// Stage-one checkpoint from `denoise`.
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// Raw observation: FeatureMap, or ViewSet with an identity view.
    #[arg(long, value_name = "PATH")]
    pub raw: PathBuf,
    /// Output directory for the three variants.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum VizCommand {
    /// Top three principal components as RGB.
    Pca(VizArgs),
    /// Per-patch feature norm.
    Norm(VizArgs),
    /// K-means cluster map with `eval.kmeans_k` clusters.
    Clusters(VizArgs),
    /// Cosine similarity to one anchor patch.
    Similarity(SimilarityArgs),
}

#[derive(Debug, Args)]
pub struct VizArgs {
    /// FeatureMap, or ViewSet with an identity view.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Output PPM image.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[command(flatten)]
    pub io: VizArgs,
    /// Anchor patch as `row,col`; the grid centre when empty.
    #[arg(long, value_name = "ROW,COL", default_value = "")]
    pub anchor: String,
}

/// A failed run: the message for standard error and the exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Contract { .. } | Error::Numeric(_) => 1,
            Error::Io { .. } | Error::Format(_) | Error::Corrupt(_) | Error::Validation(_) | Error::Parse { .. } => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

/// Profile, then config file, then `--set` overrides, then the seed.
fn build_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match cli.profile {
        Profile::Full => RunConfig::default(),
        Profile::Desk => RunConfig::desk(),
    };
    let config_error = |e: Error| Failure {
        code: 1,
        msg: format!("config: {e}"),
    };
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|source| Failure::from(Error::Io { path: path.clone(), source }))?;
        cfg.apply_text(&text).map_err(config_error)?;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(config_error)?;
    }
    cfg.set_seed(cli.seed);
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = build_config(&cli).and_then(|cfg| commands::run(&cli, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            log::emit(&[("status", "error".into()), ("exit_code", f.code.to_string())]);
            ExitCode::from(f.code)
        }
    }
}
