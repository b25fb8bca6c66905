//! `oxipipe`: synthetic recordings, the estimation pipeline and plots.
//!
//! Exit codes: 0 success (manifest written), 2 bad arguments, 3 invalid
//! config, 4 I/O, 5 RVF format, 6 signal CSV, 7 skin ROI, 8 synthesis,
//! 9 signal processing, 10 CNN, 11 ratio-of-ratios, 12 explanation,
//! 13 experiment protocol, 14 plotting.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Common, Mode};

#[derive(Parser)]
#[command(name = "oxipipe", version, about = "Contactless SpO2 estimation from hand video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recording (RVF video + signal CSV).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the estimation pipeline in one mode.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        mode: Mode,
        /// Model JSON for eval and explain.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Keep the instance with the highest validation RMSE.
        #[arg(long)]
        follow_paper_selection: bool,
    },
    /// Render a CSV or JSON output as SVG.
    Plot {
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config, seed, out } => commands::cmd_synth(&Common {
            config: config.clone(),
            seed: *seed,
            out: out.clone(),
        }),
        Command::Pipeline {
            config,
            seed,
            out,
            mode,
            model,
            follow_paper_selection,
        } => commands::cmd_pipeline(
            &Common {
                config: config.clone(),
                seed: *seed,
                out: out.clone(),
            },
            *mode,
            model.as_deref(),
            *follow_paper_selection,
        ),
        Command::Plot { input, out } => commands::cmd_plot(input, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("oxipipe: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
