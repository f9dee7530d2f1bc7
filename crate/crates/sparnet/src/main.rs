use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sparnet::cli;

/// Face super-resolution: synthesize training data, train, infer,
/// evaluate, and plot — all deterministic under a fixed seed.
#[derive(Parser)]
#[command(name = "sparnet", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build degraded/clean image pairs from high-resolution sources.
    Synth {
        /// Directory of square high-resolution images.
        #[arg(long)]
        hr_dir: PathBuf,
        /// Output directory for `lr/`, `hr/`, and the pair manifest.
        #[arg(long)]
        out_dir: PathBuf,
        /// Omit to draw one from OS entropy; the run manifest records it.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of pairs to synthesize (sources are cycled).
        #[arg(long)]
        count: usize,
    },
    /// Train the model described by a TOML experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Super-resolve every image in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write each unit's spatial attention map as a PNG.
        #[arg(long)]
        export_attention: bool,
    },
    /// Score super-resolved images against references and write a report.
    Eval {
        #[arg(long)]
        sr_dir: PathBuf,
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        out_report: PathBuf,
        /// Directory for per-image false-color error maps.
        #[arg(long)]
        error_maps: Option<PathBuf>,
    },
    /// Plot evaluation PSNR against training iteration.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(args: Args) -> sparnet::Result<()> {
    match args.command {
        Command::Synth {
            hr_dir,
            out_dir,
            seed,
            count,
        } => {
            let manifest = cli::cmd_synth(&hr_dir, &out_dir, seed, count)?;
            println!(
                "synthesized {count} pairs into {} (seed {})",
                out_dir.display(),
                manifest.seed.expect("synth always records a seed"),
            );
        }
        Command::Train { config } => {
            let manifest = cli::cmd_train(&config)?;
            println!("training finished; artifacts: {}", paths(&manifest.outputs));
        }
        Command::Infer {
            checkpoint,
            in_dir,
            out_dir,
            export_attention,
        } => {
            let manifest = cli::cmd_infer(&checkpoint, &in_dir, &out_dir, export_attention)?;
            println!(
                "super-resolved {} files into {}",
                manifest.outputs.len(),
                out_dir.display()
            );
        }
        Command::Eval {
            sr_dir,
            hr_dir,
            out_report,
            error_maps,
        } => {
            cli::cmd_eval(&sr_dir, &hr_dir, &out_report, error_maps.as_deref())?;
            println!("wrote report to {}", out_report.display());
        }
        Command::Plot { log, out } => {
            cli::cmd_plot(&log, &out)?;
            println!("wrote plot to {}", out.display());
        }
    }
    Ok(())
}

fn paths(outputs: &[PathBuf]) -> String {
    outputs
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
