use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod exit;

#[derive(Parser, Debug)]
#[command(
    name = "travmap",
    version,
    about = "Traversability maps from RGB rasters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a checkpoint on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the log and resolved config are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint on one PPM image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Config supplying the uncertainty parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Predicted depth as .dmap.
        #[arg(long)]
        depth_out: Option<PathBuf>,
        /// Fused score T as .dmap, with a PGM beside it.
        #[arg(long)]
        score_out: Option<PathBuf>,
        /// Directory receiving P, C, p_var, R_slope, R_elev and T as .dmap plus T.pgm.
        #[arg(long)]
        all_maps: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Decision threshold; overrides the config.
        #[arg(long)]
        tau: Option<f64>,
        /// Corruption as `kind:severity`, e.g. `gaussian_noise:3`.
        #[arg(long)]
        corrupt: Option<String>,
        /// JSON report path; a text rendering goes beside it.
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, count } => commands::gen_data(&config, &out, count),
        Command::Train { config, data, out } => commands::train(&config, &data, &out),
        Command::Infer {
            ckpt,
            image,
            config,
            depth_out,
            score_out,
            all_maps,
        } => commands::infer(&commands::InferArgs {
            ckpt,
            image,
            config,
            depth_out,
            score_out,
            all_maps,
        }),
        Command::Eval {
            ckpt,
            data,
            config,
            tau,
            corrupt,
            report,
        } => commands::eval(&commands::EvalArgs {
            ckpt,
            data,
            config,
            tau,
            corrupt,
            report,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit::code_for(&err))
        }
    }
}
