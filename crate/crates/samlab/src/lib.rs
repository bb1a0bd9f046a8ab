//! Reproducible experiments on top of `samlab-core`: configuration
//! parsing, seeded training runs, verification suites and their outputs.

pub mod config;
pub mod experiments;
pub mod report;
pub mod training;

pub use config::{ConfigError, Experiment, Format, OrderingMode, RunConfig};
pub use experiments::run;
pub use report::{Check, Outcome, Status};

/// Parses `text` for `experiment` and runs it.
pub fn run_text(experiment: Experiment, text: &str) -> Result<Outcome, ConfigError> {
    run(&RunConfig::parse(text, experiment)?)
}
