//! `posenorm` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use posenorm_core::pipeline::{EvalOptions, Pipeline, PipelineConfig, Stage};
use posenorm_core::retrieval::FusionMode;
use posenorm_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "posenorm",
    version,
    about = "Pose-normalized person re-identification pipeline"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides the config's output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Rerun completed stages and accept a changed config.
    #[arg(long, global = true)]
    force: bool,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic stick-person dataset.
    SynthData,
    /// Select the canonical poses from the training split.
    ClusterPoses,
    /// Train the pose-conditioned generator and discriminator.
    TrainGan,
    /// Render every image in every canonical pose.
    GenNormalized,
    /// Train backbone A (originals) and backbone B (syntheses).
    TrainReid,
    /// Score the query/gallery split with frozen models.
    Eval(EvalArgs),
    /// Write report.md from the stored metrics.
    Report,
    /// Run every stage in order.
    RunAll,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Take all models from another run directory; nothing is trained.
    #[arg(long, value_name = "DIR")]
    models_from: Option<PathBuf>,
    /// Number of canonical-pose features fused with backbone A.
    #[arg(long, value_name = "N", conflicts_with = "no_backbone_b")]
    poses: Option<usize>,
    /// Use backbone A features alone.
    #[arg(long)]
    no_backbone_b: bool,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut config = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(out) = g.out {
        config.output_dir = Some(out);
    }
    let root = config
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("no run directory: pass --out or set output_dir".into()))?;
    let quiet = g.quiet;
    let log = Box::new(move |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    });
    let mut pipeline = Pipeline::open(&root, config, g.force, log)?;
    match cli.command {
        Command::SynthData => pipeline.stage(Stage::SynthData).map(drop),
        Command::ClusterPoses => pipeline.stage(Stage::ClusterPoses).map(drop),
        Command::TrainGan => pipeline.stage(Stage::TrainGan).map(drop),
        Command::GenNormalized => pipeline.stage(Stage::GenNormalized).map(drop),
        Command::TrainReid => pipeline.stage(Stage::TrainReid).map(drop),
        Command::Eval(a) => {
            let mode = if a.no_backbone_b {
                Some(FusionMode::BackboneA)
            } else {
                a.poses.map(|poses| FusionMode::Fused { poses })
            };
            let opts = EvalOptions {
                models_from: a.models_from,
                mode,
                ablations: a.no_backbone_b.then_some(false),
            };
            pipeline.eval(&opts).map(drop)
        }
        Command::Report => pipeline.stage(Stage::Report).map(drop),
        Command::RunAll => pipeline.run_all(),
    }
}
