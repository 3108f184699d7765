use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use nordheim::config::{load_config, Config};
use nordheim::driver::{self, exit_code, CheckName, EXIT_CHECK, EXIT_CONFIG, EXIT_OK};
use nordheim::Error;

/// Environment variable holding the default worker count.
const WORKERS_ENV: &str = "NORDHEIM_WORKERS";

#[derive(Parser)]
#[command(name = "nordheim", version, about = "Boltzmann-Nordheim solver via the Haldane alpha-approximation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trajectory and write NDJSON diagnostics and snapshots.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run matched trajectories over the [sweep] alphas.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a verification suite: equilibrium, oracle, geometry or conservation.
    Check {
        name: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the header and moments of a snapshot file.
    SnapshotDump { file: PathBuf },
}

fn workers(config: Option<&Config>) -> std::result::Result<Option<usize>, Error> {
    if let Some(w) = config.and_then(|c| c.run.workers) {
        return Ok(Some(w));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::ConfigValue {
                key: WORKERS_ENV.into(),
                message: format!("`{s}` is not a positive integer"),
            }),
        },
        Err(_) => Ok(None),
    }
}

fn in_pool<T: Send>(n: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n {
        b = b.num_threads(n);
    }
    match b.build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    match serde_json::to_string(value) {
        Ok(s) => println!("{s}"),
        Err(e) => error!("cannot serialize output: {e}"),
    }
}

fn execute(command: Command) -> std::result::Result<i32, Error> {
    let load = |p: &Path| -> std::result::Result<Config, Error> { load_config(p) };
    match command {
        Command::Run { config } => {
            let c = load(&config)?;
            let summary = in_pool(workers(Some(&c))?, || driver::cmd_run(&c))?;
            print_json(&summary);
            Ok(EXIT_OK)
        }
        Command::Sweep { config } => {
            let c = load(&config)?;
            let report = in_pool(workers(Some(&c))?, || driver::cmd_sweep(&c))?;
            print_json(&report.tables);
            Ok(EXIT_OK)
        }
        Command::Check { name, config } => {
            let name: CheckName = name.parse()?;
            let c = load(&config)?;
            let report = in_pool(workers(Some(&c))?, || driver::cmd_check(&c, name))?;
            print_json(&report);
            Ok(if report.passed { EXIT_OK } else { EXIT_CHECK })
        }
        Command::SnapshotDump { file } => {
            print_json(&driver::snapshot_dump(&file)?);
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { EXIT_OK as u8 });
        }
    };
    let code = match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
