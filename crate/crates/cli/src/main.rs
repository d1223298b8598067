use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use delayshoot_cli::{parse_config, run_gramian, run_solve, run_sweep, CliError, RunOutcome};

#[derive(Parser)]
#[command(
    name = "delayshoot",
    version,
    about = "Delay homotopy shooting for delayed optimal control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Log continuation steps to standard error.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Continuation up to `tau_target`.
    Solve { config: PathBuf },
    /// One continuation through every delay in `sweep`.
    Sweep { config: PathBuf },
    /// Controllability Gramian at tau = 0 or at every swept delay.
    Gramian { config: PathBuf },
}

fn run(cli: Cli) -> Result<RunOutcome, CliError> {
    let (path, runner): (_, fn(&_) -> _) = match &cli.command {
        Command::Solve { config } => (config, run_solve),
        Command::Sweep { config } => (config, run_sweep),
        Command::Gramian { config } => (config, run_gramian),
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    let mut config = parse_config(&text)?;
    if let Some(dir) = cli.output_dir {
        config.output_dir = dir;
    }
    runner(&config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    let code = match run(cli) {
        Ok(outcome) => {
            for f in &outcome.files {
                log::info!("wrote {}", f.display());
            }
            if !outcome.succeeded {
                eprintln!("delayshoot: continuation did not reach the requested delay");
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("delayshoot: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
