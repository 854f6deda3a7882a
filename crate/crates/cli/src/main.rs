use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod manifest;

/// Rehearsal-free incremental anomaly detection on synthetic texture tasks.
#[derive(Debug, Parser)]
#[command(name = "oner", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train over every configured task, checkpointing after each one.
    Train {
        /// JSON run configuration; the bundled default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Final experience file; checkpoints get a `.task<t>` suffix.
        #[arg(long)]
        out: PathBuf,
        /// Overrides every seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate an experience on the test splits and write a metric report.
    Eval {
        #[arg(long)]
        experience: PathBuf,
        /// A dataset directory written by `gen-data`, or a run configuration.
        #[arg(long)]
        data: PathBuf,
        /// JSON report path; a key/value text report is written next to it.
        #[arg(long)]
        report: PathBuf,
        /// Also write the raw per-image and per-patch scores.
        #[arg(long)]
        dump_scores: Option<PathBuf>,
    },
    /// Score one image (raw little-endian f32, row-major).
    Score {
        #[arg(long)]
        experience: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Patch scores as flat f32; a JSON summary is written to `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print bank sizes, component counts and freeze flags.
    Inspect {
        #[arg(long)]
        experience: PathBuf,
    },
    /// Write the synthetic datasets of a configuration to a directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ONER_LOG", "warn"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with exit 0; usage errors exit 2.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };

    let result = match cli.command {
        Command::Train { config, out, seed } => commands::train(config.as_deref(), &out, seed),
        Command::Eval {
            experience,
            data,
            report,
            dump_scores,
        } => commands::eval(&experience, &data, &report, dump_scores.as_deref()),
        Command::Score {
            experience,
            image,
            out,
        } => commands::score(&experience, &image, &out),
        Command::Inspect { experience } => commands::inspect(&experience),
        Command::GenData { config, out, seed } => commands::gen_data(config.as_deref(), &out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
