use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use voxmt::cli;

#[derive(Parser)]
#[command(
    name = "voxmt",
    version,
    about = "Sparse voxel lidar segmentation and detection"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled scene.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every scene in a directory and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Predict per-point labels and boxes for one scene.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Refuse to run unless the checkpoint was trained with this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a predictions file against a labeled scene.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Time each pipeline stage over scenes of growing density.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = cli::GRADCHECK_SAMPLES)]
        samples: usize,
    },
}

fn run(cmd: Command) -> voxmt::Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cmd {
        Command::Gen {
            seed,
            spec,
            out: path,
        } => cli::cmd_gen(seed, spec.as_deref(), &path),
        Command::Train {
            config,
            scenes,
            out: path,
            steps,
        } => cli::cmd_train(&config, &scenes, &path, steps, &mut out),
        Command::Infer {
            ckpt,
            scene,
            out: path,
            config,
        } => cli::cmd_infer(&ckpt, &scene, &path, config.as_deref()),
        Command::Eval { pred, gt } => cli::cmd_eval(&pred, &gt, &mut out),
        Command::Bench { config } => cli::cmd_bench(&config, &mut out),
        Command::Gradcheck {
            config,
            eps,
            samples,
        } => cli::cmd_gradcheck(&config, eps, samples, &mut out),
    }?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("voxmt: {e}");
            ExitCode::FAILURE
        }
    }
}
