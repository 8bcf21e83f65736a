use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qbsdej_cli::{CliError, EXIT_CHECK_FAILED, EXIT_PASS};

#[derive(Parser)]
#[command(name = "qbsdej", version, about = "Experiments for quadratic-exponential BSDEs with jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory; overrides the config's `output` field.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for path-parallel loops.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured experiment.
    Run { config: PathBuf },
    /// Evaluate the configured reference oracles.
    Oracle { config: PathBuf },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

fn code(result: Result<bool, CliError>) -> ExitCode {
    match result {
        Ok(true) => ExitCode::from(EXIT_PASS as u8),
        Ok(false) => {
            eprintln!("one or more checks failed; see summary.csv");
            ExitCode::from(EXIT_CHECK_FAILED as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return code(Err(CliError::Runtime(e.to_string())));
        }
    }
    match cli.command {
        Command::Run { config } => code(qbsdej_cli::run(&config, cli.out.as_deref())),
        Command::Oracle { config } => code(qbsdej_cli::oracle(&config, cli.out.as_deref())),
        Command::Validate { config } => code(qbsdej_cli::validate(&config).map(|cfg| {
            println!("{}: ok ({:?})", config.display(), cfg.experiment);
            true
        })),
    }
}
