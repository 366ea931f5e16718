//! Command-line front end: `run`, `compare`, `new-client`, and `selftest`.
//!
//! Exit codes: 0 success; 1 runtime failure or a failed self-test;
//! 2 argument, configuration, or usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use dp2fl::config::{ExperimentConfig, Method};
use dp2fl::harness::{
    compare, format_comparison, format_new_client_report, new_client_experiment, run_method,
    with_thread_limit, write_run_artifacts,
};
use dp2fl::protocol::InitMode;
use dp2fl::selftest::{run_selftest, SelfTestHooks};

#[derive(Parser)]
#[command(
    name = "dp2fl",
    version,
    about = "Deterministic simulator for dual-prompt personalized federated learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write round_*.json, summary.json, metrics.csv.
    Run {
        /// Experiment configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the artifact set.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured method
        /// (dp2fl, local, fedavg_prompt, fedprox_prompt).
        #[arg(long)]
        method: Option<String>,
    },
    /// Run every (method, seed) cell and write comparison tables.
    Compare {
        /// Experiment configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated methods, or `all`.
        #[arg(long)]
        methods: String,
        /// Comma-separated seeds; items may be single numbers or
        /// inclusive ranges like `0..9`.
        #[arg(long)]
        seeds: String,
        /// Output directory for per-run artifacts and comparison tables.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a federation, admit a new client, and measure onboarding.
    NewClient {
        /// Experiment configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Rounds to train before the new client joins (at most the
        /// configured round count).
        #[arg(long, value_name = "J")]
        join_round: usize,
        /// Initialization granted to the newcomer:
        /// global, init, initglo, or all.
        #[arg(long)]
        init: String,
        /// Output directory for new_client.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant self-test suite and print a pass/fail table.
    Selftest,
}

enum CliError {
    /// Bad arguments or configuration: exit 2.
    Usage(String),
    /// A well-formed request that failed while executing: exit 1.
    Runtime(String),
}

fn usage(message: impl ToString) -> CliError {
    CliError::Usage(message.to_string())
}

fn runtime(message: impl ToString) -> CliError {
    CliError::Runtime(message.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(path).map_err(usage)
}

fn parse_methods(raw: &str) -> Result<Vec<Method>, CliError> {
    if raw.trim() == "all" {
        return Ok(Method::ALL.to_vec());
    }
    raw.split(',')
        .map(str::trim)
        .filter(|item| !item.is_empty())
        .map(|item| Method::from_str(item).map_err(usage))
        .collect::<Result<Vec<_>, _>>()
        .and_then(|methods| {
            if methods.is_empty() {
                Err(usage("--methods must name at least one method"))
            } else {
                Ok(methods)
            }
        })
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>, CliError> {
    let mut seeds = Vec::new();
    for item in raw
        .split(',')
        .map(str::trim)
        .filter(|item| !item.is_empty())
    {
        if let Some((start, end)) = item.split_once("..") {
            let start: u64 = start
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad seed range start in {item:?}")))?;
            let end: u64 = end
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad seed range end in {item:?}")))?;
            if end < start {
                return Err(usage(format!("empty seed range {item:?}")));
            }
            seeds.extend(start..=end);
        } else {
            seeds.push(
                item.parse()
                    .map_err(|_| usage(format!("bad seed {item:?}")))?,
            );
        }
    }
    if seeds.is_empty() {
        return Err(usage("--seeds must name at least one seed"));
    }
    Ok(seeds)
}

fn parse_init_modes(raw: &str) -> Result<Vec<InitMode>, CliError> {
    if raw.trim() == "all" {
        return Ok(InitMode::ALL.to_vec());
    }
    raw.split(',')
        .map(str::trim)
        .filter(|item| !item.is_empty())
        .map(|item| InitMode::from_str(item).map_err(usage))
        .collect::<Result<Vec<_>, _>>()
        .and_then(|modes| {
            if modes.is_empty() {
                Err(usage("--init must name at least one mode"))
            } else {
                Ok(modes)
            }
        })
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            method,
        } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(method) = method {
                config.method = Method::from_str(&method).map_err(usage)?;
            }
            config.validate().map_err(usage)?;
            let output = with_thread_limit(|| run_method(&config))
                .map_err(usage)?
                .map_err(runtime)?;
            write_run_artifacts(&out, &output).map_err(runtime)?;
            let mean = output.summary.final_personalized_mean;
            println!(
                "{} seed {}: {} rounds, mean test accuracy {:.4}, artifacts in {}",
                output.summary.method.name(),
                output.summary.seed,
                output.summary.rounds.len(),
                mean.accuracy,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare {
            config,
            methods,
            seeds,
            out,
        } => {
            let config = load_config(&config)?;
            config.validate().map_err(usage)?;
            let methods = parse_methods(&methods)?;
            let seeds = parse_seeds(&seeds)?;
            let report = with_thread_limit(|| compare(&config, &methods, &seeds, Some(&out)))
                .map_err(usage)?
                .map_err(runtime)?;
            print!("{}", format_comparison(&report));
            println!("tables written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::NewClient {
            config,
            join_round,
            init,
            out,
        } => {
            let config = load_config(&config)?;
            config.validate().map_err(usage)?;
            let modes = parse_init_modes(&init)?;
            if join_round > config.rounds {
                return Err(usage(format!(
                    "--join-round {join_round} exceeds the configured {} rounds",
                    config.rounds
                )));
            }
            let report = with_thread_limit(|| new_client_experiment(&config, join_round, &modes))
                .map_err(usage)?
                .map_err(runtime)?;
            std::fs::create_dir_all(&out).map_err(runtime)?;
            let mut text = serde_json::to_string_pretty(&report).map_err(runtime)?;
            text.push('\n');
            std::fs::write(out.join("new_client.json"), text).map_err(runtime)?;
            print!("{}", format_new_client_report(&report));
            println!("report written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let mut hooks = SelfTestHooks::default();
            // Test-only sabotage switch proving the suite can fail.
            if std::env::var("DP2FL_SELFTEST_MUTATE").as_deref() == Ok("task_weights") {
                hooks.corrupt_task_weights = Some(Box::new(|weights| weights[0] += 0.25));
            }
            let report = with_thread_limit(|| run_selftest(&hooks)).map_err(usage)?;
            print!("{}", report.render());
            if report.all_passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
    }
}
