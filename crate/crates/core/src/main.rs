use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use m2repa::cli;
use m2repa::trainer::{Horizon, SweepAxis};

#[derive(Parser)]
#[command(name = "m2repa", version, about = "Tri-modal flow-matching video model with decoupled expert alignment")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one variant and write checkpoint, loss CSV, metrics and summary.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a checkpoint on its validation clips.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// short or long
        #[arg(long, default_value = "short")]
        frames: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all seven variants per seed and tabulate them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One run per value along lambda_decouple, tap_layer or projector_depth.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the λ grid for lambda_decouple.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write hidden, projected and expert features of one clip plus PCA images.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        clip: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(args: Args) -> m2repa::Result<()> {
    match args.cmd {
        Cmd::Train { config, seed, variant, steps, out } => {
            let r = cli::cmd_train(&cli::TrainArgs {
                config: config.as_deref(),
                seed,
                variant: variant.as_deref(),
                steps,
                out: &out,
            })?;
            print!("{}", cli::summary_text(&r));
            println!("wall clock: {:.1}s", r.wall_clock_secs);
        }
        Cmd::Eval { checkpoint, frames, out } => {
            let h = Horizon::parse(&frames)?;
            let m = cli::cmd_eval(&checkpoint, h, &out)?;
            println!("{m:?}");
        }
        Cmd::Ablate { config, seeds, steps, out } => {
            let seeds = cli::parse_seeds(&seeds)?;
            let t = cli::cmd_ablate(config.as_deref(), &seeds, steps, &out)?;
            print!("{}", cli::ablation_means_csv(&t));
        }
        Cmd::Sweep { config, axis, values, out } => {
            let axis = SweepAxis::parse(&axis)?;
            let values = match values {
                Some(v) => cli::parse_values(&v)?,
                None if axis == SweepAxis::LambdaDecouple => m2repa::trainer::LAMBDA_GRID.to_vec(),
                None => return Err(m2repa::Error::Config(format!("--values required for {}", axis.name()))),
            };
            let reports = cli::cmd_sweep(config.as_deref(), axis, &values, &out)?;
            print!("{}", cli::sweep_csv(axis, &values, &reports));
        }
        Cmd::ExportFeatures { checkpoint, layer, clip, out } => {
            let s = cli::cmd_export_features(&checkpoint, layer, clip, &out)?;
            for (i, j, c) in &s.expert_cka {
                println!("expert CKA {i}-{j}: {c:.4}");
            }
            println!("wrote {} files to {}", s.files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
