use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod manifest;

use commands::{EvaluateArgs, GenerateArgs, LabelNoiseArgs, MockPredArgs, PerturbArgs};
use manifest::{Manifest, MANIFEST_NAME};

#[derive(Parser, Debug)]
#[command(name = "histosynth", version, about = "Synthetic H&E tissue images and uncertainty benchmarks")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "HISTOSYNTH_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render scenes with images, masks and scene files.
    Generate {
        #[command(flatten)]
        args: GenerateArgs,
        #[arg(long, env = "HISTOSYNTH_OUT")]
        out: PathBuf,
    },
    /// Re-render a dataset at several perturbation levels.
    Perturb {
        #[command(flatten)]
        args: PerturbArgs,
        #[arg(long, env = "HISTOSYNTH_OUT")]
        out: PathBuf,
    },
    /// Write corrupted copies of ground-truth masks.
    Labelnoise {
        #[command(flatten)]
        args: LabelNoiseArgs,
        #[arg(long, env = "HISTOSYNTH_OUT")]
        out: PathBuf,
    },
    /// Write softmax stacks derived from ground truth.
    Mockpred {
        #[command(flatten)]
        args: MockPredArgs,
        #[arg(long, env = "HISTOSYNTH_OUT")]
        out: PathBuf,
    },
    /// Score softmax stacks against ground truth.
    Evaluate {
        #[command(flatten)]
        args: EvaluateArgs,
        #[arg(long, env = "HISTOSYNTH_OUT")]
        out: PathBuf,
    },
    /// Repeat a run from its manifest into a new directory and compare.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, env = "HISTOSYNTH_OUT")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let manifest = match cli.command {
        Command::Generate { args, out } => commands::generate(&args, None, &out)?,
        Command::Perturb { args, out } => commands::perturb(&args, &out)?,
        Command::Labelnoise { args, out } => commands::labelnoise(&args, &out)?,
        Command::Mockpred { args, out } => commands::mockpred(&args, &out)?,
        Command::Evaluate { args, out } => commands::evaluate(&args, &out)?,
        Command::Rerun { manifest, out } => return rerun(&manifest, &out),
    };
    eprintln!("wrote {} files", manifest.outputs.len());
    Ok(())
}

fn rerun(path: &std::path::Path, out: &std::path::Path) -> Result<()> {
    let old = Manifest::load(path)?;
    let args = old.args.clone();
    let parse = || format!("manifest arguments for `{}`", old.command);
    let new = match old.command.as_str() {
        "generate" => {
            let config = old.config.clone().context("generate manifest without a config")?;
            commands::generate(&serde_json::from_value(args).with_context(parse)?, Some(config), out)?
        }
        "perturb" => commands::perturb(&serde_json::from_value(args).with_context(parse)?, out)?,
        "labelnoise" => commands::labelnoise(&serde_json::from_value(args).with_context(parse)?, out)?,
        "mockpred" => commands::mockpred(&serde_json::from_value(args).with_context(parse)?, out)?,
        "evaluate" => commands::evaluate(&serde_json::from_value(args).with_context(parse)?, out)?,
        other => bail!("unknown command `{other}` in {}", path.display()),
    };
    let diff = old.diff_outputs(&new);
    if !diff.is_empty() {
        bail!("rerun differs from {} in: {}", path.display(), diff.join(", "));
    }
    eprintln!("rerun reproduced {} files ({})", new.outputs.len(), out.join(MANIFEST_NAME).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
