use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dtn_learn_cli::commands::{self, CommandError};
use dtn_learn_cli::config::{ConfigError, NodeConfig};
use dtn_learn_cli::daemon::{self, DaemonError};

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_BIND: u8 = 3;

#[derive(Parser)]
#[command(name = "dtn-learn", version, about = "Delay-tolerant learning network node and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a node daemon.
    Run {
        /// Node configuration file (TOML).
        config: PathBuf,
    },
    /// Run a simulation scenario and write metrics.
    Sim {
        /// Scenario file (JSON) or bundled scenario name.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "sim-out")]
        out: PathBuf,
        /// Repeat the run over an integer range of one key, e.g. mule_count=1..4.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Print the summary of a finished simulation output directory.
    Report { dir: PathBuf },
    /// Write a synthetic article corpus.
    GenCorpus {
        #[arg(long)]
        count: usize,
        /// MIN..MAX, e.g. 10MB..30MB.
        #[arg(long, default_value = "10MB..30MB")]
        size_range: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a JSON array of timed topic requests for a scenario file.
    GenWorkload {
        #[arg(long)]
        requests: usize,
        #[arg(long, default_value_t = 12.0)]
        hours: f64,
        #[arg(long, default_value = "rural-1")]
        node: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn command_exit(e: CommandError) -> ExitCode {
    match e {
        CommandError::Invalid(m) => fail(EXIT_INVALID, m),
        CommandError::Io(m) => fail(EXIT_FAILURE, m),
    }
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

fn run_daemon(path: PathBuf) -> ExitCode {
    let cfg = match NodeConfig::load(&path) {
        Ok(c) => c,
        Err(e @ ConfigError::Read { .. }) => return fail(EXIT_INVALID, e),
        Err(e) => return fail(EXIT_INVALID, format!("{}: {e}", path.display())),
    };
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(daemon::run(cfg, shutdown_signal())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ DaemonError::Bind { .. }) => fail(EXIT_BIND, e),
        Err(e) => fail(EXIT_FAILURE, e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    match cli.command {
        Command::Run { config } => run_daemon(config),
        Command::Sim { scenario, seed, out, sweep } => {
            let mut cfg = match commands::load_scenario(&scenario) {
                Ok(c) => c,
                Err(e) => return command_exit(e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let res = match sweep {
                None => commands::simulate(&cfg, &out).map(|s| commands::format_summary(&s)),
                Some(arg) => commands::parse_sweep(&arg)
                    .and_then(|(key, values)| commands::sweep(&cfg, &key, &values, &out))
                    .map(|rows| commands::format_sweep(&rows)),
            };
            match res {
                Ok(table) => {
                    print!("{table}");
                    ExitCode::SUCCESS
                }
                Err(e) => command_exit(e),
            }
        }
        Command::Report { dir } => match commands::report(&dir) {
            Ok(t) => {
                print!("{t}");
                ExitCode::SUCCESS
            }
            Err(e) => command_exit(e),
        },
        Command::GenCorpus { count, size_range, out, seed } => {
            let res = commands::parse_size_range(&size_range)
                .and_then(|(min, max)| commands::gen_corpus(count, min, max, seed, &out));
            match res {
                Ok(files) => {
                    println!("wrote {} articles to {}", files.len(), out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => command_exit(e),
            }
        }
        Command::GenWorkload { requests, hours, node, seed } => {
            match commands::gen_workload(requests, hours, &node, seed) {
                Ok(w) => {
                    println!("{}", serde_json::to_string_pretty(&w).expect("workload serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => command_exit(e),
            }
        }
    }
}
