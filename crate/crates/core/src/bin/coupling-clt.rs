use clap::{Parser, Subcommand};
use coupling_clt::runner::{self, Overrides};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(version, about = "Coupling-based CLT experiments for Markov chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a configuration file.
    Run(Args),
    /// Check a configuration and print the resolved settings and constants.
    Validate(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; overrides `run.workers`.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Args {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            workers: self.workers,
            out: self.out.clone(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => runner::run(&args.config, &args.overrides()).map(|outcome| {
            println!("{}", outcome.results.summary());
            if outcome.pass() {
                0
            } else {
                1
            }
        }),
        Command::Validate(args) => runner::validate(&args.config, &args.overrides()).map(|v| {
            print!("{}", v.render());
            0
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(e.exit_status() as u8)
        }
    }
}
