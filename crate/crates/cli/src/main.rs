//! `tune`: command-line front end for data-driven controller tuning
//! campaigns. `tune run` executes a configured Monte Carlo study,
//! `tune validate` checks a configuration without running it, and
//! `tune report` re-renders the summary table from a finished campaign
//! directory.
//!
//! Exit codes: 0 success, 1 configuration problem, 2 runtime failure.
//! Set `TUNE_LOG=debug` (or `info`) for progress output on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vrft::{
    load_config, load_summary, render_summary, run_campaign, CampaignConfig, Error, Method,
};

#[derive(Parser)]
#[command(
    name = "tune",
    version,
    about = "Data-driven controller tuning campaigns"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo tuning campaign described by a TOML config
    Run {
        /// Campaign configuration file
        #[arg(long)]
        config: PathBuf,
        /// Output directory for datasets, CSVs and the summary
        #[arg(long)]
        out: PathBuf,
        /// Override the master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of Monte Carlo runs
        #[arg(long)]
        runs: Option<usize>,
        /// Override the estimators, comma separated (ols,iv,ctls)
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Worker threads (defaults to the number of cores)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Parse and validate a configuration file, reporting every problem
    Validate {
        /// Campaign configuration file
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-render the summary table from a campaign output directory
    Report {
        /// Directory a previous `tune run` wrote
        #[arg(long = "in")]
        dir: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn print_error(e: &Error) {
    match e {
        Error::InvalidConfig(problems) => {
            eprintln!("error: configuration is invalid:");
            for p in problems {
                eprintln!("  - {p}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

fn load_with_overrides(
    config_path: &PathBuf,
    seed: Option<u64>,
    runs: Option<usize>,
    methods: Option<Vec<String>>,
) -> Result<CampaignConfig, Error> {
    let mut config = load_config(config_path)?;
    if let Some(s) = seed {
        config.master_seed = s;
    }
    if let Some(r) = runs {
        if r == 0 {
            return Err(Error::InvalidConfig(vec![
                "--runs: must be at least 1".into()
            ]));
        }
        config.n_runs = r;
    }
    if let Some(names) = methods {
        let mut parsed: Vec<Method> = Vec::new();
        let mut problems = Vec::new();
        for name in &names {
            match name.parse::<Method>() {
                Ok(m) => parsed.push(m),
                Err(e) => problems.push(format!("--methods: {e}")),
            }
        }
        if parsed.is_empty() {
            problems.push("--methods: must select at least one estimator".into());
        }
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems));
        }
        config.methods = parsed;
    }
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TUNE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            runs,
            methods,
            jobs,
        } => {
            let config = match load_with_overrides(&config, seed, runs, methods) {
                Ok(c) => c,
                Err(e) => {
                    print_error(&e);
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(j) = jobs {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(j.max(1))
                    .build_global()
                {
                    eprintln!("error: thread pool: {e}");
                    return ExitCode::from(EXIT_RUNTIME);
                }
            }
            log::info!(
                "running {} runs of {} samples into {}",
                config.n_runs,
                config.n_samples,
                out.display()
            );
            match run_campaign(&config, &out) {
                Ok(report) => {
                    print!("{}", render_summary(&report.stats));
                    if !report.failures.is_empty() {
                        eprintln!(
                            "note: {} estimator failure(s) recorded in failures.csv",
                            report.failures.len()
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    print_error(&e);
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
        Command::Validate { config } => match load_config(&config) {
            Ok(c) => {
                println!(
                    "ok: {} runs x {} samples, methods {}",
                    c.n_runs,
                    c.n_samples,
                    c.methods
                        .iter()
                        .map(|m| m.name())
                        .collect::<Vec<_>>()
                        .join(",")
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                print_error(&e);
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Report { dir } => match load_summary(&dir) {
            Ok(stats) => {
                print!("{}", render_summary(&stats));
                ExitCode::SUCCESS
            }
            Err(e) => {
                print_error(&e);
                ExitCode::from(EXIT_RUNTIME)
            }
        },
    }
}
