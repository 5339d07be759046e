//! Command-line front end: dataset synthesis, haze degradation, training,
//! evaluation, response-map export and the verification suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hiproto::checkpoint::CheckpointError;
use hiproto::data::DataError;
use hiproto::detector::DetectorError;
use hiproto::evaluate::EvalError;
use hiproto::losses::PrVariant;
use hiproto::proto::Upsample;
use thiserror::Error;

use config::{EvalRun, FogRun, SynthRun, TrainRun, VisualizeRun};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) | CliError::Io(..) => 2,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DetectorError> for CliError {
    fn from(e: DetectorError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "hiproto", version, about = "Hierarchical prototype detector laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with clean, fog and low-light variants.
    Synth(SynthArgs),
    /// Apply the haze model to a dataset directory or a PPM image.
    Fog(FogArgs),
    /// Train the detector.
    Train(TrainArgs),
    /// Evaluate a checkpoint: mAP, Disc., Spar. and AUC_ft.
    Eval(EvalArgs),
    /// Export per-level response maps and the combined saliency map.
    Visualize(VisualizeArgs),
    /// Run the finite-difference gradient suite.
    CheckGrads(CheckGradsArgs),
    /// Run the rasterization and AUC oracles.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Comma-separated subset of clean,fog,lowlight.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Atmospheric light of the fog variant.
    #[arg(long = "fog-A", alias = "fog-a")]
    pub fog_a: Option<f64>,
    #[arg(long)]
    pub fog_beta: Option<f64>,
    #[arg(long)]
    pub lowlight_gamma: Option<f64>,
    #[arg(long)]
    pub lowlight_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FogArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory or PPM image.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "A", alias = "a")]
    pub a: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Continue from a checkpoint, keeping its step count and momentum.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_rpc: bool,
    #[arg(long)]
    pub no_pr: bool,
    #[arg(long)]
    pub no_splgs: bool,
    #[arg(long)]
    pub pr_variant: Option<PrVariant>,
    /// Train the response loss into the prototype layer only.
    #[arg(long)]
    pub rpc_stop_grad: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for metrics.json and metrics.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Restrict inference to one pyramid level (1-3).
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long)]
    pub score_threshold: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// PPM image at the checkpoint's input size.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Foreground class index, or name when --data is given.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset supplying class names.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub upsample: Option<String>,
}

#[derive(Debug, Args)]
pub struct CheckGradsArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Also write the results as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 200)]
    pub maps: usize,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

pub fn resolve_synth(a: SynthArgs) -> Result<SynthRun, CliError> {
    let mut r: SynthRun = config::load(a.common.config.as_deref())?;
    set_opt(&mut r.out, a.out);
    set(&mut r.seed, a.seed);
    set(&mut r.train, a.train);
    set(&mut r.test, a.test);
    set(&mut r.image_size, a.image_size);
    set(&mut r.variants, a.variants);
    set(&mut r.fog_a, a.fog_a);
    set(&mut r.fog_beta, a.fog_beta);
    set(&mut r.lowlight_gamma, a.lowlight_gamma);
    set(&mut r.lowlight_sigma, a.lowlight_sigma);
    Ok(r)
}

pub fn resolve_fog(a: FogArgs) -> Result<FogRun, CliError> {
    let mut r: FogRun = config::load(a.common.config.as_deref())?;
    set_opt(&mut r.input, a.input);
    set_opt(&mut r.out, a.out);
    set(&mut r.a, a.a);
    set(&mut r.beta, a.beta);
    Ok(r)
}

pub fn resolve_train(a: TrainArgs) -> Result<TrainRun, CliError> {
    let mut r: TrainRun = config::load(a.common.config.as_deref())?;
    set_opt(&mut r.data, a.data);
    set_opt(&mut r.out, a.out);
    set(&mut r.split, a.split);
    set_opt(&mut r.resume, a.resume);
    set(&mut r.epochs, a.epochs);
    set(&mut r.lr, a.lr);
    set(&mut r.batch_size, a.batch_size);
    set(&mut r.seed, a.seed);
    set(&mut r.pr_variant, a.pr_variant);
    r.rpc &= !a.no_rpc;
    r.pr &= !a.no_pr;
    r.splgs &= !a.no_splgs;
    r.rpc_stop_grad |= a.rpc_stop_grad;
    Ok(r)
}

pub fn resolve_eval(a: EvalArgs) -> Result<EvalRun, CliError> {
    let mut r: EvalRun = config::load(a.common.config.as_deref())?;
    set_opt(&mut r.checkpoint, a.checkpoint);
    set_opt(&mut r.data, a.data);
    set_opt(&mut r.out, a.out);
    set(&mut r.split, a.split);
    set_opt(&mut r.level, a.level);
    set(&mut r.score_threshold, a.score_threshold);
    set(&mut r.nms_iou, a.nms_iou);
    Ok(r)
}

fn parse_upsample(s: &str) -> Result<Upsample, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown upsampling `{s}` (bilinear, nearest)")))
}

pub fn resolve_visualize(a: VisualizeArgs) -> Result<VisualizeRun, CliError> {
    let mut r: VisualizeRun = config::load(a.common.config.as_deref())?;
    set_opt(&mut r.checkpoint, a.checkpoint);
    set_opt(&mut r.image, a.image);
    set_opt(&mut r.class, a.class);
    set_opt(&mut r.out, a.out);
    set_opt(&mut r.data, a.data);
    if let Some(u) = a.upsample {
        r.upsample = parse_upsample(&u)?;
    }
    Ok(r)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => {
            let force = a.common.force;
            let out = commands::cmd_synth(&resolve_synth(a)?, force)?;
            for (name, digest) in out.variants {
                println!("{name} {digest}");
            }
        }
        Command::Fog(a) => {
            let force = a.common.force;
            let p = commands::cmd_fog(&resolve_fog(a)?, force)?;
            println!("{}", p.display());
        }
        Command::Train(a) => {
            let force = a.common.force;
            let s = commands::cmd_train(&resolve_train(a)?, force)?;
            for (i, m) in s.epoch_means.iter().enumerate() {
                eprintln!("epoch {i}: mean loss {m:.5}");
            }
            println!("{} steps, checkpoint {}", s.steps, s.checkpoint.display());
        }
        Command::Eval(a) => {
            let force = a.common.force;
            let r = commands::cmd_eval(&resolve_eval(a)?, force)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        }
        Command::Visualize(a) => {
            let force = a.common.force;
            for p in commands::cmd_visualize(&resolve_visualize(a)?, force)? {
                println!("{}", p.display());
            }
        }
        Command::CheckGrads(a) => {
            let suite = commands::cmd_check_grads(a.seeds)?;
            for c in &suite.cases {
                let mark = if c.passed { "ok  " } else { "FAIL" };
                println!("{mark} {:<24} worst rel err {:.3e} (seed {})", c.name, c.worst, c.worst_seed);
            }
            println!("{} cases, {} seeds, {:.1} s", suite.cases.len(), suite.seeds, suite.seconds);
            if let Some(p) = a.json {
                config::persist(&suite, &p)?;
            }
            if !suite.passed() {
                return Err(CliError::Validation("gradient check failed".into()));
            }
        }
        Command::Oracle(a) => {
            let reports = commands::cmd_oracle(a.trials, a.maps, a.seed);
            for r in &reports {
                let mark = if r.passed() { "ok  " } else { "FAIL" };
                println!("{mark} {:<22} {} trials, {} mismatches, worst {:.3e}", r.name, r.trials, r.mismatches, r.worst);
                if let Some(f) = &r.first_failure {
                    println!("     first failure: {f}");
                }
            }
            if reports.iter().any(|r| !r.passed()) {
                return Err(CliError::Validation("oracle disagreement".into()));
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
