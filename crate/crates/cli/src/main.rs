use clap::{Args, Parser, Subcommand};
use splatpose::netcore::Variant;
use splatpose::synthdata::Layout;
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(
    name = "splatpose",
    version,
    about = "Pose-free Gaussian splatting from sparse unposed views"
)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every configurable command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `loss.w_reproj=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate deterministic sample bundles and a manifest.
    GenScene {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of bundles.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// box-room, textured-planes or random-cloud.
        #[arg(long)]
        layout: Option<Layout>,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Component switch `M|P|I|R=on|off`; repeatable.
        #[arg(long, value_name = "KEY=on|off")]
        ablate: Vec<String>,
        /// v2 or v2l.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Evaluate a checkpoint on a generated dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by gen-scene.
        #[arg(long)]
        data: PathBuf,
        /// Manifest split to evaluate.
        #[arg(long, default_value = "all")]
        split: String,
        /// Refine target poses by photometric alignment before rendering.
        #[arg(long)]
        epa: bool,
        /// Seed for RANSAC sampling.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render every view of a bundle from a checkpoint's predictions.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A single bundle directory.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table and config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the Gaussians predicted for a bundle as PLY.
    ExportPly {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        anyhow::ensure!(n > 0, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match cli.command {
        Command::GenScene {
            common,
            seed,
            n,
            layout,
        } => commands::cmd_gen_scene(&common, seed, n, layout),
        Command::Train {
            common,
            seed,
            ablate,
            variant,
        } => commands::cmd_train(&common, seed, &ablate, variant),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            epa,
            seed,
        } => commands::cmd_eval(&common, &checkpoint, &data, &split, epa, seed),
        Command::Render {
            checkpoint,
            sample,
            out,
        } => commands::cmd_render(&checkpoint, &sample, &out),
        Command::Gradcheck { cases, seed, out } => {
            return commands::cmd_gradcheck(cases, seed, out.as_deref())
        }
        Command::ExportPly {
            checkpoint,
            sample,
            out,
        } => commands::cmd_export_ply(&checkpoint, &sample, &out),
    }?;
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
