//! Command-line definition and config-file merging.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use saccn::Precision;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "saccn",
    version,
    about = "Crowd counting with regional and semantic attention: synthesize scenes, train, evaluate, infer",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure."
)]
pub struct Cli {
    /// Seed for data synthesis, initialisation, batching and augmentation
    #[arg(long, global = true, env = "SACCN_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Floating-point precision for training and inference
    #[arg(long, global = true, default_value_t = Precision::F32, value_parser = parse_precision)]
    pub precision: Precision,

    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// File of `key=value` lines (one per line, `#` comments) using flag
    /// names as keys; command-line flags take precedence [default: none]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: saccn::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scenes (images and point annotations) to the output directory
    Synth(SynthArgs),
    /// Train a model on a dataset directory; writes model.ckpt and loss.csv
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory; writes eval.json
    Eval(EvalArgs),
    /// Predict the density map of one image; writes <stem>.den.pgm and <stem>.den.json
    Infer(InferArgs),
    /// Run the gradient-check suite and print the worst operation
    Gradcheck,
    /// Print a checkpoint's settings and tensor table
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of scenes
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Scene height and width in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Image channels (1 or 3)
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    /// Smallest head count per scene
    #[arg(long, default_value_t = 0)]
    pub min_count: usize,
    /// Largest head count per scene
    #[arg(long, default_value_t = 20)]
    pub max_count: usize,
    /// Smallest head radius in pixels
    #[arg(long, default_value_t = 1.5)]
    pub min_radius: f64,
    /// Largest head radius in pixels
    #[arg(long, default_value_t = 3.5)]
    pub max_radius: f64,
    /// Number of distractor shapes per scene
    #[arg(long, default_value_t = 4)]
    pub clutter: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from a training checkpoint; network settings come from it [default: none]
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total optimisation steps
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    /// Scenes per step
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Adam first-moment decay
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    /// Adam second-moment decay
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    /// Adam denominator offset
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
    /// Square training crop side; 0 uses whole scenes
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    /// Horizontal flip probability
    #[arg(long, default_value_t = 0.5)]
    pub flip_p: f64,
    /// Ground-truth Gaussian width in pixels
    #[arg(long, default_value_t = 4.0)]
    pub sigma: f64,
    /// Print the loss every this many steps
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    /// Width of the first encoder stage
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    /// Channel reduction inside the regional attention blocks
    #[arg(long, default_value_t = 4)]
    pub ram_reduction: usize,
    /// Channel reduction of the spatial self-attention query and key
    #[arg(long, default_value_t = 8)]
    pub ssa_reduction: usize,
    /// The network predicts density times this factor
    #[arg(long, default_value_t = 2000.0)]
    pub density_scale: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Model checkpoint; required unless --gt-as-pred [default: none]
    #[arg(long, required_unless_present = "gt_as_pred")]
    pub checkpoint: Option<PathBuf>,
    /// Ground-truth Gaussian width in pixels
    #[arg(long, default_value_t = 4.0)]
    pub sigma: f64,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Reduce per-image terms in dataset order for bit-exact results at any --jobs [default: off]
    #[arg(long, action = ArgAction::SetTrue, default_value_t = false)]
    pub strict_order: bool,
    /// Use the ground-truth densities as predictions [default: off]
    #[arg(long, action = ArgAction::SetTrue, default_value_t = false)]
    pub gt_as_pred: bool,
    /// Split images into 2^L column strips for GAME instead of a 2^L x 2^L grid [default: off]
    #[arg(long, action = ArgAction::SetTrue, default_value_t = false)]
    pub game_literal: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PGM or PPM image
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint file
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Whether `id` was given on the command line, at the top level or to
/// the subcommand.
pub fn from_command_line(matches: &ArgMatches, id: &str) -> bool {
    let sub = matches.subcommand().map(|(_, m)| m);
    [Some(matches), sub].into_iter().flatten().any(|m| {
        matches!(m.try_contains_id(id), Ok(true)) && m.value_source(id) == Some(ValueSource::CommandLine)
    })
}

pub struct Parsed {
    pub cli: Cli,
    pub matches: ArgMatches,
}

/// Parse `argv`, then fold in `--config` entries for every setting not
/// given on the command line.
pub fn parse(argv: Vec<OsString>) -> Result<Parsed, CliError> {
    let strict = || Cli::command().try_get_matches_from(&argv).map_err(CliError::Clap);
    // Required arguments may come from the config file, so the first pass
    // only collects what is present.
    let first = Cli::command().ignore_errors(true).try_get_matches_from(&argv).map_err(CliError::Clap)?;
    let (Some(path), Some((sub_name, _))) = (first.get_one::<PathBuf>("config").cloned(), first.subcommand()) else {
        return finish(strict()?);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
    let root = Cli::command();
    let sub = root.find_subcommand(sub_name).expect("parsed subcommand exists");

    let mut extra: Vec<OsString> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), i + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}: expected `key=value`, found `{line}`", at())))?;
        let long = key.trim().replace('_', "-");
        let value = value.trim();
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(long.as_str()) && !matches!(long.as_str(), "config" | "help" | "version"))
            .ok_or_else(|| CliError::Usage(format!("{}: unknown key `{}`", at(), key.trim())))?;
        if from_command_line(&first, arg.get_id().as_str()) {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            let on: bool = value
                .parse()
                .map_err(|_| CliError::Usage(format!("{}: `{long}` expects true or false", at())))?;
            if on {
                extra.push(format!("--{long}").into());
            }
        } else {
            extra.push(format!("--{long}={value}").into());
        }
    }
    let mut full = argv;
    full.extend(extra);
    let merged = Cli::command().try_get_matches_from(full).map_err(CliError::Clap)?;
    finish(merged)
}

fn finish(matches: ArgMatches) -> Result<Parsed, CliError> {
    let cli = Cli::from_arg_matches(&matches).map_err(CliError::Clap)?;
    Ok(Parsed { cli, matches })
}
