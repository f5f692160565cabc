mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bds_core::BdsError;
use clap::{Parser, Subcommand};

use commands::Status;
use config::{DataArgs, FileConfig, FitFlags, QueryFlags, SimFlags};

#[derive(Debug, Parser)]
#[command(name = "bds", version, about = "Birth-death-shift inference for panel genotype data")]
struct Cli {
    /// TOML file with default values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one regression model.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Model formula, e.g. "lambda~1+age, nu~1, mu~1".
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        flags: FitFlags,
    },
    /// Fit several models and rank them by BIC.
    Compare {
        #[command(flatten)]
        data: DataArgs,
        /// Model formula; repeat for each candidate.
        #[arg(long = "model")]
        models: Vec<String>,
        #[command(flatten)]
        flags: FitFlags,
    },
    /// Transition probabilities from (a, 0) over time t.
    Probs(QueryFlags),
    /// Restricted moments of the sufficient statistics from (a, 0).
    Moments(QueryFlags),
    /// Simulate a panel dataset.
    Simulate(SimFlags),
    /// Check input files and summarise them.
    Validate {
        #[command(flatten)]
        data: DataArgs,
    },
}

fn run(cli: Cli) -> Result<Status> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Fit { data, model, flags } => {
            let data = data.resolve(&cfg)?;
            let model = model.or_else(|| cfg.model.clone());
            commands::fit(&data, model.as_deref(), &flags.resolve(&cfg))
        }
        Command::Compare { data, models, flags } => {
            let data = data.resolve(&cfg)?;
            let models = if models.is_empty() {
                cfg.models.clone().unwrap_or_default()
            } else {
                models
            };
            commands::compare(&data, &models, &flags.resolve(&cfg))
        }
        Command::Probs(q) => commands::probs(&q.resolve(&cfg)?),
        Command::Moments(q) => commands::moments(&q.resolve(&cfg)?),
        Command::Simulate(s) => commands::simulate(&s.resolve(&cfg)),
        Command::Validate { data } => commands::validate(&data.resolve(&cfg)?),
    }
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    match err.chain().find_map(|e| e.downcast_ref::<BdsError>()) {
        Some(e) if e.is_validation() => ("validation", 2),
        Some(_) => ("numerical", 3),
        None => ("usage", 2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("warning: the optimiser did not converge; results were written anyway");
            ExitCode::from(4)
        }
        Err(err) => {
            let (kind, code) = classify(&err);
            let doc = serde_json::json!({
                "error": { "kind": kind, "exit_code": code, "message": format!("{err:#}") }
            });
            eprintln!("{doc}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_parses_without_covariates() {
        let m = bds_core::ModelSpec::parse(commands::DEFAULT_MODEL, &["1".to_string()]).unwrap();
        assert_eq!(m.n_params(), 3);
    }

    #[test]
    fn numeric_errors_map_to_three() {
        let e = anyhow::Error::from(BdsError::Aliasing { tail: 0.1, n: 32 });
        assert_eq!(classify(&e).1, 3);
        let e = anyhow::Error::from(BdsError::InvalidInput("x".into()));
        assert_eq!(classify(&e).1, 2);
        assert_eq!(classify(&anyhow::anyhow!("missing -a")).1, 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
