//! Command-line flags and the optional TOML file carrying the same keys.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use bds_core::model::RateTriple;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Deserializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Em,
    Fm,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Oracle {
    Mc,
    Unif,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    Simple,
    Covariate,
}

/// `lambda,nu,mu` on the command line, a string or a 3-element array in TOML.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates(pub RateTriple);

impl FromStr for Rates {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad rate '{p}': {e}")))
            .collect::<Result<_, _>>()?;
        Rates::from_slice(&parts)
    }
}

impl Rates {
    fn from_slice(v: &[f64]) -> Result<Self, String> {
        match v {
            [l, n, m] => RateTriple::new(*l, *n, *m).map(Rates).map_err(|e| e.to_string()),
            _ => Err(format!("expected three rates lambda,nu,mu, got {}", v.len())),
        }
    }
}

impl<'de> Deserialize<'de> for Rates {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            List(Vec<f64>),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::List(v) => Rates::from_slice(&v).map_err(serde::de::Error::custom),
        }
    }
}

/// Everything a config file may set. Flags win over file values.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub genotypes: Option<PathBuf>,
    pub reduced: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub model: Option<String>,
    pub models: Option<Vec<String>>,
    pub method: Option<Method>,
    pub grid: Option<usize>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub accelerate: Option<bool>,
    pub n_units: Option<usize>,
    pub no_se: Option<bool>,
    pub start: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub a: Option<usize>,
    pub t: Option<f64>,
    pub rates: Option<Rates>,
    pub oracle: Option<Oracle>,
    pub reps: Option<usize>,
    pub allow_alias: Option<bool>,
    pub seed: Option<u64>,
    pub recipe: Option<Recipe>,
    pub dt: Option<f64>,
    pub n: Option<usize>,
    pub genome_size: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Long-form genotype CSV (patient_id,time,site_id).
    #[arg(long)]
    pub genotypes: Option<PathBuf>,
    /// Reduced-interval CSV (patient_id,t_start,t_end,a,b,c_new).
    #[arg(long, conflicts_with = "genotypes")]
    pub reduced: Option<PathBuf>,
    /// Covariates CSV (patient_id,<names>...).
    #[arg(long)]
    pub covariates: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Genotypes(PathBuf),
    Reduced(PathBuf),
}

#[derive(Debug, Clone)]
pub struct Data {
    pub source: DataSource,
    pub covariates: Option<PathBuf>,
}

impl DataArgs {
    pub fn resolve(&self, cfg: &FileConfig) -> anyhow::Result<Data> {
        let source = match (&self.genotypes, &self.reduced) {
            (Some(g), _) => DataSource::Genotypes(g.clone()),
            (_, Some(r)) => DataSource::Reduced(r.clone()),
            _ => match (&cfg.genotypes, &cfg.reduced) {
                (Some(_), Some(_)) => bail!("config sets both genotypes and reduced"),
                (Some(g), _) => DataSource::Genotypes(g.clone()),
                (_, Some(r)) => DataSource::Reduced(r.clone()),
                _ => bail!("no input: pass --genotypes or --reduced"),
            },
        };
        Ok(Data {
            source,
            covariates: self.covariates.clone().or_else(|| cfg.covariates.clone()),
        })
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct FitFlags {
    /// Fitting method.
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Fixed grid size (power of two); chosen automatically when omitted.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Relative log-likelihood tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// ODE relative tolerance.
    #[arg(long)]
    pub rtol: Option<f64>,
    /// ODE absolute tolerance.
    #[arg(long)]
    pub atol: Option<f64>,
    /// Use the no-change shortcut in the E-step.
    #[arg(long)]
    pub accelerate: bool,
    /// Number of units in the BIC penalty (default: number of intervals).
    #[arg(long)]
    pub n_units: Option<usize>,
    /// Skip standard errors.
    #[arg(long)]
    pub no_se: bool,
    /// Starting coefficients, flattened in (lambda, nu, mu) block order.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub start: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct FitSettings {
    pub method: Method,
    pub grid: Option<usize>,
    pub tol: f64,
    pub max_iter: Option<usize>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub accelerate: bool,
    pub n_units: Option<usize>,
    pub se: bool,
    pub start: Option<Vec<f64>>,
    pub out: PathBuf,
}

impl FitFlags {
    pub fn resolve(&self, cfg: &FileConfig) -> FitSettings {
        FitSettings {
            method: self.method.or(cfg.method).unwrap_or(Method::Em),
            grid: self.grid.or(cfg.grid),
            tol: self.tol.or(cfg.tol).unwrap_or(1e-6),
            max_iter: self.max_iter.or(cfg.max_iter),
            rtol: self.rtol.or(cfg.rtol),
            atol: self.atol.or(cfg.atol),
            accelerate: self.accelerate || cfg.accelerate.unwrap_or(false),
            n_units: self.n_units.or(cfg.n_units),
            se: !(self.no_se || cfg.no_se.unwrap_or(false)),
            start: self.start.clone().or_else(|| cfg.start.clone()),
            out: self
                .out
                .clone()
                .or_else(|| cfg.out.clone())
                .unwrap_or_else(|| PathBuf::from("bds-out")),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct QueryFlags {
    /// Initial number of particles.
    #[arg(short = 'a', long = "a")]
    pub a: Option<usize>,
    /// Elapsed time.
    #[arg(short = 't', long = "t")]
    pub t: Option<f64>,
    /// Rates as lambda,nu,mu.
    #[arg(long)]
    pub rates: Option<Rates>,
    /// Grid size (power of two); chosen from `a` when omitted.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Add comparison columns from an independent method.
    #[arg(long, value_enum)]
    pub oracle: Option<Oracle>,
    /// Monte Carlo replicates for `--oracle mc`.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report results even when the aliasing alarm fires.
    #[arg(long)]
    pub allow_alias: bool,
    /// Output CSV file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct QuerySettings {
    pub a: usize,
    pub t: f64,
    pub rates: RateTriple,
    pub grid: Option<usize>,
    pub oracle: Option<Oracle>,
    pub reps: usize,
    pub seed: u64,
    pub allow_alias: bool,
    pub out: Option<PathBuf>,
}

impl QueryFlags {
    pub fn resolve(&self, cfg: &FileConfig) -> anyhow::Result<QuerySettings> {
        let Some(a) = self.a.or(cfg.a) else { bail!("missing -a") };
        let Some(t) = self.t.or(cfg.t) else { bail!("missing -t") };
        let Some(rates) = self.rates.or(cfg.rates) else { bail!("missing --rates") };
        Ok(QuerySettings {
            a,
            t,
            rates: rates.0,
            grid: self.grid.or(cfg.grid),
            oracle: self.oracle.or(cfg.oracle),
            reps: self.reps.or(cfg.reps).unwrap_or(2000),
            seed: self.seed.or(cfg.seed).unwrap_or(1),
            allow_alias: self.allow_alias || cfg.allow_alias.unwrap_or(false),
            out: self.out.clone().or_else(|| cfg.out.clone()),
        })
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimFlags {
    /// Data-generating recipe.
    #[arg(long, value_enum)]
    pub recipe: Option<Recipe>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Spacing between observations.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Number of intervals (simple) or patients (covariate).
    #[arg(long)]
    pub n: Option<usize>,
    /// Rates as lambda,nu,mu (simple recipe).
    #[arg(long)]
    pub rates: Option<Rates>,
    #[arg(long)]
    pub genome_size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SimSettings {
    pub recipe: Recipe,
    pub seed: u64,
    pub dt: Option<f64>,
    pub n: Option<usize>,
    pub rates: Option<RateTriple>,
    pub genome_size: Option<usize>,
    pub out: PathBuf,
}

impl SimFlags {
    pub fn resolve(&self, cfg: &FileConfig) -> SimSettings {
        SimSettings {
            recipe: self.recipe.or(cfg.recipe).unwrap_or(Recipe::Simple),
            seed: self.seed.or(cfg.seed).unwrap_or(1),
            dt: self.dt.or(cfg.dt),
            n: self.n.or(cfg.n),
            rates: self.rates.or(cfg.rates).map(|r| r.0),
            genome_size: self.genome_size.or(cfg.genome_size),
            out: self
                .out
                .clone()
                .or_else(|| cfg.out.clone())
                .unwrap_or_else(|| PathBuf::from("bds-sim")),
        }
    }
}
