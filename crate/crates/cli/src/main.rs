use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod settings;

use settings::Settings;

#[derive(Parser)]
#[command(name = "mkgp", version, about = "Multi-source Gaussian-process classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labelled multi-source dataset from the model.
    Generate(Settings),
    /// Sample the posterior and write traces plus convergence diagnostics.
    Fit(Settings),
    /// Recompute diagnostics for existing traces.
    Diagnose(Settings),
    /// Predictive class probabilities for new subjects.
    Predict(Settings),
    /// Cross-validated scores, accuracy–reject curve and weight summaries.
    Evaluate(Settings),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    NotConverged(String),
    Numerical(String),
}

impl From<mkgp::Error> for CliError {
    fn from(e: mkgp::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    let (settings, run): (Settings, fn(&Settings) -> Result<(), CliError>) = match command {
        Command::Generate(s) => (s, commands::generate),
        Command::Fit(s) => (s, commands::fit),
        Command::Diagnose(s) => (s, commands::diagnose),
        Command::Predict(s) => (s, commands::predict),
        Command::Evaluate(s) => (s, commands::evaluate),
    };
    let settings = settings.resolve()?;
    if let Some(jobs) = settings.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    run(&settings)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, msg) = match e {
                CliError::Usage(m) => (2, m),
                CliError::NotConverged(m) => (3, m),
                CliError::Numerical(m) => (4, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
