use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ordered_capacity::experiment::run_file;

#[derive(Parser)]
#[command(version, about = "Capacity allocation experiments for ordered-entry loss systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for grid cells, restarts and replications.
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
    },
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ORDERED_CAPACITY_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, workers } => match run_file(&config, out, workers) {
            Ok(outcome) => {
                print!("{}", outcome.summary);
                for f in &outcome.files {
                    eprintln!("wrote {}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
