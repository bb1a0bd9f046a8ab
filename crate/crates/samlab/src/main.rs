use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use samlab::config::formats_from_arg;
use samlab::{ConfigError, Experiment, RunConfig};

#[derive(Parser)]
#[command(name = "samlab", version, about = "SAM/USAM optimizer and SDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One-step moments against the predicted drift, plus diffusion checks
    VerifyDrift(RunArgs),
    /// Weak error of the SDE against the discrete optimizer over an η grid
    VerifyWeakOrder(RunArgs),
    /// Gradient-norm sandwich bounds and monotonicity in the batch size
    VerifyProp1(RunArgs),
    /// Gibbs weights and the finite-difference norm estimator
    VerifyEstimator(RunArgs),
    /// Final noise trace across micro-batch sizes
    Msweep(RunArgs),
    /// Steps to leave the sharp basin of the double well
    Escape(RunArgs),
    /// Final noise trace per optimizer
    Trace(RunArgs),
    /// Estimator bias against the finite-difference step
    DeltaSweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value configuration file
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: samlab-out/<subcommand>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use seeds 0..N instead of the configured ones
    #[arg(long)]
    seeds: Option<u64>,
    /// Comma-separated output formats: csv, json
    #[arg(long)]
    format: Option<String>,
}

impl Command {
    fn split(self) -> (Experiment, RunArgs) {
        match self {
            Command::VerifyDrift(a) => (Experiment::VerifyDrift, a),
            Command::VerifyWeakOrder(a) => (Experiment::VerifyWeakOrder, a),
            Command::VerifyProp1(a) => (Experiment::VerifyProp1, a),
            Command::VerifyEstimator(a) => (Experiment::VerifyEstimator, a),
            Command::Msweep(a) => (Experiment::Msweep, a),
            Command::Escape(a) => (Experiment::Escape, a),
            Command::Trace(a) => (Experiment::Trace, a),
            Command::DeltaSweep(a) => (Experiment::DeltaSweep, a),
        }
    }
}

fn resolve(experiment: Experiment, args: &RunArgs) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::parse(&text, experiment)?;
    if let Some(n) = args.seeds {
        cfg = cfg.with_seed_count(n);
    }
    if let Some(f) = &args.format {
        cfg.formats = formats_from_arg(f)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (experiment, args) = Cli::parse().command.split();
    let outcome = match resolve(experiment, &args).and_then(|cfg| samlab::run(&cfg)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let dir = args
        .out
        .unwrap_or_else(|| PathBuf::from("samlab-out").join(experiment.name()));
    if let Err(e) = outcome.write(&dir) {
        eprintln!("cannot write outputs to {}: {e}", dir.display());
        return ExitCode::from(2);
    }
    for c in &outcome.checks {
        println!("{}", c.line());
    }
    let status = outcome.status();
    println!("{experiment}: {status:?} ({})", dir.display());
    ExitCode::from(status.exit_code() as u8)
}
