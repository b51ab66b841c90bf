use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lleb::cli;

#[derive(Parser)]
#[command(name = "lleb", about = "Last-layer uncertainty experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate reports into mean ± standard error per method.
    Compare {
        reports: Vec<PathBuf>,
        /// Where to write the CSV form; the aligned table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(args: Args) -> lleb::Result<()> {
    match args.command {
        Command::Train { config, out, seed } => cli::cmd_train(&config, &out, seed),
        Command::Eval {
            checkpoint,
            config,
            out,
            seed,
        } => {
            for r in cli::cmd_eval(&checkpoint, &config, &out, seed)? {
                let auroc = r
                    .auroc
                    .map_or_else(|| "N/A".to_string(), |a| format!("{a:.4}"));
                println!(
                    "{} seed {}: acc {:.4} ece {:.4} auroc {auroc}",
                    r.method, r.seed, r.accuracy, r.ece
                );
            }
            Ok(())
        }
        Command::Compare { reports, out } => {
            let (csv, table) = cli::cmd_compare(&reports)?;
            if let Some(path) = out {
                std::fs::write(path, csv)?;
            }
            print!("{table}");
            Ok(())
        }
    }
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
