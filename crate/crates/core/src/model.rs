//! Domain types for discretely observed birth-death-shift data.
//!
//! A patient is observed as a sequence of genotypes (sets of occupied sites).
//! Each consecutive pair of genotypes is collapsed to a [`ReducedInterval`]
//! `(a; b, c_new, dt)`: `a` sites occupied at the start, `b` of them still
//! occupied at the end, `c_new` sites occupied at the end that were empty at
//! the start. Rates enter through a log-linear model in per-patient
//! covariates, with the intercept carried as an explicit all-ones column.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{BdsError, Result};

/// Name of the all-ones covariate column added at ingest.
pub const INTERCEPT: &str = "1";

/// Per-particle birth, shift and death rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateTriple {
    pub lambda: f64,
    pub nu: f64,
    pub mu: f64,
}

impl RateTriple {
    pub fn new(lambda: f64, nu: f64, mu: f64) -> Result<Self> {
        for (name, v) in [("lambda", lambda), ("nu", nu), ("mu", mu)] {
            if !v.is_finite() || v < 0.0 {
                return Err(BdsError::InvalidParameter(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(Self { lambda, nu, mu })
    }

    /// Total per-particle event rate.
    pub fn theta(&self) -> f64 {
        self.lambda + self.nu + self.mu
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lambda: self.lambda * factor,
            nu: self.nu * factor,
            mu: self.mu * factor,
        }
    }
}

/// The three rates, used to label coefficient blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rate {
    Lambda,
    Nu,
    Mu,
}

impl Rate {
    pub const ALL: [Rate; 3] = [Rate::Lambda, Rate::Nu, Rate::Mu];

    pub fn name(self) -> &'static str {
        match self {
            Rate::Lambda => "lambda",
            Rate::Nu => "nu",
            Rate::Mu => "mu",
        }
    }
}

/// Log-linear coefficients, one block per rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionCoefficients {
    pub beta_lambda: Vec<f64>,
    pub beta_nu: Vec<f64>,
    pub beta_mu: Vec<f64>,
}

impl RegressionCoefficients {
    pub fn new(beta_lambda: Vec<f64>, beta_nu: Vec<f64>, beta_mu: Vec<f64>) -> Result<Self> {
        let beta = Self {
            beta_lambda,
            beta_nu,
            beta_mu,
        };
        if beta.flatten().iter().any(|b| !b.is_finite()) {
            return Err(BdsError::InvalidParameter(
                "regression coefficients must be finite".into(),
            ));
        }
        Ok(beta)
    }

    pub fn zeros(widths: [usize; 3]) -> Self {
        Self {
            beta_lambda: vec![0.0; widths[0]],
            beta_nu: vec![0.0; widths[1]],
            beta_mu: vec![0.0; widths[2]],
        }
    }

    /// Intercept-only coefficients reproducing the given rates.
    pub fn from_rates(rates: RateTriple) -> Self {
        Self {
            beta_lambda: vec![rates.lambda.ln()],
            beta_nu: vec![rates.nu.ln()],
            beta_mu: vec![rates.mu.ln()],
        }
    }

    pub fn block(&self, rate: Rate) -> &[f64] {
        match rate {
            Rate::Lambda => &self.beta_lambda,
            Rate::Nu => &self.beta_nu,
            Rate::Mu => &self.beta_mu,
        }
    }

    pub fn block_mut(&mut self, rate: Rate) -> &mut Vec<f64> {
        match rate {
            Rate::Lambda => &mut self.beta_lambda,
            Rate::Nu => &mut self.beta_nu,
            Rate::Mu => &mut self.beta_mu,
        }
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.beta_lambda.len(), self.beta_nu.len(), self.beta_mu.len()]
    }

    /// Total number of free coefficients.
    pub fn len(&self) -> usize {
        self.widths().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenation `(beta_lambda, beta_nu, beta_mu)`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.beta_lambda);
        out.extend_from_slice(&self.beta_nu);
        out.extend_from_slice(&self.beta_mu);
        out
    }

    pub fn unflatten(flat: &[f64], widths: [usize; 3]) -> Result<Self> {
        if flat.len() != widths.iter().sum::<usize>() {
            return Err(BdsError::InvalidParameter(format!(
                "expected {} coefficients, got {}",
                widths.iter().sum::<usize>(),
                flat.len()
            )));
        }
        let (l, rest) = flat.split_at(widths[0]);
        let (n, m) = rest.split_at(widths[1]);
        Self::new(l.to_vec(), n.to_vec(), m.to_vec())
    }
}

fn dot(beta: &[f64], z: &[f64]) -> f64 {
    beta.iter().zip(z).map(|(b, x)| b * x).sum()
}

fn checked_exp(rate: Rate, eta: f64) -> Result<f64> {
    let v = eta.exp();
    if !v.is_finite() || v <= 0.0 {
        return Err(BdsError::InvalidParameter(format!(
            "{} linear predictor {eta} leaves the representable rate range",
            rate.name()
        )));
    }
    Ok(v)
}

/// Log-linear rates `exp(beta . z)` for a covariate vector of full width.
pub fn rates_from_covariates(beta: &RegressionCoefficients, z: &[f64]) -> Result<RateTriple> {
    for rate in Rate::ALL {
        if beta.block(rate).len() != z.len() {
            return Err(BdsError::InvalidParameter(format!(
                "{} block has {} coefficients but covariate vector has length {}",
                rate.name(),
                beta.block(rate).len(),
                z.len()
            )));
        }
    }
    Ok(RateTriple {
        lambda: checked_exp(Rate::Lambda, dot(&beta.beta_lambda, z))?,
        nu: checked_exp(Rate::Nu, dot(&beta.beta_nu, z))?,
        mu: checked_exp(Rate::Mu, dot(&beta.beta_mu, z))?,
    })
}

/// Which covariate columns drive each rate.
///
/// Column indices refer to the dataset's covariate vector; blocks may differ
/// in width, so a "simple" rate is a block holding only the intercept column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub lambda: Vec<usize>,
    pub nu: Vec<usize>,
    pub mu: Vec<usize>,
    pub column_names: Vec<String>,
}

impl ModelSpec {
    /// Every rate driven by every covariate column.
    pub fn full(column_names: &[String]) -> Self {
        let all: Vec<usize> = (0..column_names.len()).collect();
        Self {
            lambda: all.clone(),
            nu: all.clone(),
            mu: all,
            column_names: column_names.to_vec(),
        }
    }

    /// Intercept-only model; requires an intercept column.
    pub fn intercept_only(column_names: &[String]) -> Result<Self> {
        Self::parse("lambda~1, nu~1, mu~1", column_names)
    }

    /// Parse `lambda~1+EI, nu~1, mu~1+EI+HIV`. Rates left out default to `~1`.
    pub fn parse(text: &str, column_names: &[String]) -> Result<Self> {
        let resolve = |term: &str| -> Result<usize> {
            column_names
                .iter()
                .position(|c| c == term)
                .ok_or_else(|| {
                    BdsError::InvalidInput(format!(
                        "unknown covariate '{term}' in model spec (known: {})",
                        column_names.join(", ")
                    ))
                })
        };
        let mut blocks: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
        for clause in text.split([',', ';']).map(str::trim).filter(|c| !c.is_empty()) {
            let (lhs, rhs) = clause.split_once('~').ok_or_else(|| {
                BdsError::InvalidInput(format!("model clause '{clause}' lacks '~'"))
            })?;
            let rate = match lhs.trim() {
                "lambda" | "λ" | "birth" => "lambda",
                "nu" | "ν" | "shift" => "nu",
                "mu" | "μ" | "death" => "mu",
                other => {
                    return Err(BdsError::InvalidInput(format!(
                        "unknown rate '{other}' in model spec"
                    )))
                }
            };
            if blocks.contains_key(rate) {
                return Err(BdsError::InvalidInput(format!(
                    "rate '{rate}' specified twice in model spec"
                )));
            }
            let mut cols = Vec::new();
            for term in rhs.split('+').map(str::trim) {
                if term.is_empty() {
                    return Err(BdsError::InvalidInput(format!(
                        "empty term in model clause '{clause}'"
                    )));
                }
                let idx = resolve(term)?;
                if cols.contains(&idx) {
                    return Err(BdsError::InvalidInput(format!(
                        "term '{term}' repeated in model clause '{clause}'"
                    )));
                }
                cols.push(idx);
            }
            blocks.insert(rate, cols);
        }
        let mut take = |rate: &'static str| -> Result<Vec<usize>> {
            match blocks.remove(rate) {
                Some(c) => Ok(c),
                None => Ok(vec![resolve(INTERCEPT)?]),
            }
        };
        Ok(Self {
            lambda: take("lambda")?,
            nu: take("nu")?,
            mu: take("mu")?,
            column_names: column_names.to_vec(),
        })
    }

    pub fn columns(&self, rate: Rate) -> &[usize] {
        match rate {
            Rate::Lambda => &self.lambda,
            Rate::Nu => &self.nu,
            Rate::Mu => &self.mu,
        }
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.lambda.len(), self.nu.len(), self.mu.len()]
    }

    /// Number of free coefficients.
    pub fn n_params(&self) -> usize {
        self.widths().iter().sum()
    }

    /// Term names for one block, used in reports.
    pub fn term_names(&self, rate: Rate) -> Vec<String> {
        self.columns(rate)
            .iter()
            .map(|&i| self.column_names[i].clone())
            .collect()
    }

    /// Design row for one rate, selected from a full covariate vector.
    pub fn design_row(&self, rate: Rate, z: &[f64]) -> Vec<f64> {
        self.columns(rate).iter().map(|&i| z[i]).collect()
    }

    pub fn rates_for(&self, beta: &RegressionCoefficients, z: &[f64]) -> Result<RateTriple> {
        if beta.widths() != self.widths() {
            return Err(BdsError::InvalidParameter(format!(
                "coefficient widths {:?} do not match model widths {:?}",
                beta.widths(),
                self.widths()
            )));
        }
        let eta = |rate: Rate| -> f64 {
            self.columns(rate)
                .iter()
                .zip(beta.block(rate))
                .map(|(&i, b)| b * z[i])
                .sum()
        };
        Ok(RateTriple {
            lambda: checked_exp(Rate::Lambda, eta(Rate::Lambda))?,
            nu: checked_exp(Rate::Nu, eta(Rate::Nu))?,
            mu: checked_exp(Rate::Mu, eta(Rate::Mu))?,
        })
    }

    /// Human-readable form, e.g. `lambda~1+EI, nu~1, mu~1`.
    pub fn describe(&self) -> String {
        Rate::ALL
            .iter()
            .map(|&r| format!("{}~{}", r.name(), self.term_names(r).join("+")))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// A set of occupied sites. Identifiers are opaque labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    sites: BTreeSet<String>,
}

impl Genotype {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn contains(&self, site: &str) -> bool {
        self.sites.contains(site)
    }

    /// Returns false if the site was already present.
    pub fn insert(&mut self, site: impl Into<String>) -> bool {
        self.sites.insert(site.into())
    }

    pub fn remove(&mut self, site: &str) -> bool {
        self.sites.remove(site)
    }

    pub fn sites(&self) -> impl Iterator<Item = &str> {
        self.sites.iter().map(String::as_str)
    }
}

impl<S: Into<String>> FromIterator<S> for Genotype {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self {
            sites: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// One observation interval in the reduced two-type state space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedInterval {
    pub a: usize,
    pub b: usize,
    pub c_new: usize,
    pub dt: f64,
}

impl ReducedInterval {
    pub fn new(a: usize, b: usize, c_new: usize, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(BdsError::InvalidInput(format!(
                "interval length must be positive, got {dt}"
            )));
        }
        if b > a {
            return Err(BdsError::InvalidInput(format!(
                "retained count b={b} exceeds initial count a={a}"
            )));
        }
        Ok(Self { a, b, c_new, dt })
    }

    /// Sites lost over the interval.
    pub fn lost(&self) -> usize {
        self.a - self.b
    }

    pub fn gained(&self) -> usize {
        self.c_new
    }

    pub fn is_no_change(&self) -> bool {
        self.a == self.b && self.c_new == 0
    }

    /// No-change interval with a non-empty start, eligible for the E-step fast path.
    pub fn fast_path_eligible(&self) -> bool {
        self.is_no_change() && self.a > 0
    }

    pub fn max_count(&self) -> usize {
        self.a.max(self.b + self.c_new)
    }
}

/// The state-space reduction of a consecutive genotype pair.
pub fn reduce_pair(g1: &Genotype, g2: &Genotype, dt: f64) -> Result<ReducedInterval> {
    let b = g1.sites.intersection(&g2.sites).count();
    let c_new = g2.sites.difference(&g1.sites).count();
    ReducedInterval::new(g1.len(), b, c_new, dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub genotype: Genotype,
}

/// A reduced interval together with its position in calendar time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedInterval {
    pub t_start: f64,
    pub t_end: f64,
    pub interval: ReducedInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub id: String,
    pub covariates: Vec<f64>,
    /// Empty when the patient was ingested from reduced intervals.
    pub observations: Vec<Observation>,
    pub intervals: Vec<TimedInterval>,
}

/// Validated panel data. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub covariate_names: Vec<String>,
    pub patients: Vec<Patient>,
}

/// Input for one patient before validation.
#[derive(Debug, Clone, Default)]
pub struct PatientInput {
    pub id: String,
    pub covariates: Vec<f64>,
    pub observations: Vec<Observation>,
}

/// Rows as parsed from the ingest formats, before validation.
#[derive(Debug, Clone, Default)]
pub struct RawDataset {
    /// Covariate names as in the covariates file (no intercept).
    pub covariate_names: Vec<String>,
    pub covariates: Vec<RawCovariateRow>,
    pub source: RawSource,
}

#[derive(Debug, Clone)]
pub enum RawSource {
    Genotypes(Vec<RawGenotypeRow>),
    Reduced(Vec<RawReducedRow>),
}

impl Default for RawSource {
    fn default() -> Self {
        RawSource::Genotypes(Vec::new())
    }
}

/// `patient_id,time,site_id`; an empty site id records an empty genotype.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGenotypeRow {
    pub line: usize,
    pub patient_id: String,
    pub time: f64,
    pub site_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCovariateRow {
    pub line: usize,
    pub patient_id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawReducedRow {
    pub line: usize,
    pub patient_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub a: usize,
    pub b: usize,
    pub c_new: usize,
}

/// Summary counts reported by validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub patients: usize,
    pub observations: usize,
    pub intervals: usize,
    pub no_change_intervals: usize,
    pub fast_path_eligible: usize,
    pub extinct_start_intervals: usize,
    pub max_count: usize,
}

/// Validate parsed rows and attach reduced intervals.
///
/// The covariate vector of every patient gets a leading intercept column
/// named [`INTERCEPT`].
pub fn validate_dataset(raw: RawDataset) -> Result<PanelDataset> {
    let mut problems = Vec::new();
    let width = raw.covariate_names.len();
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(raw.covariate_names.iter().cloned());
    if raw.covariate_names.iter().any(|n| n == INTERCEPT) {
        problems.push(format!("covariate name '{INTERCEPT}' is reserved for the intercept"));
    }

    let mut covariates: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in &raw.covariates {
        if row.values.len() != width {
            problems.push(format!(
                "line {}: patient '{}' has {} covariates, expected {width}",
                row.line,
                row.patient_id,
                row.values.len()
            ));
            continue;
        }
        if let Some(v) = row.values.iter().find(|v| !v.is_finite()) {
            problems.push(format!("line {}: non-finite covariate {v}", row.line));
            continue;
        }
        let mut z = vec![1.0];
        z.extend_from_slice(&row.values);
        if covariates.insert(row.patient_id.clone(), z).is_some() {
            problems.push(format!(
                "line {}: duplicate covariate row for patient '{}'",
                row.line, row.patient_id
            ));
        }
    }
    let have_covariates = !raw.covariates.is_empty() || width > 0;
    let lookup = |id: &str, problems: &mut Vec<String>| -> Vec<f64> {
        if !have_covariates {
            return vec![1.0];
        }
        match covariates.get(id) {
            Some(z) => z.clone(),
            None => {
                problems.push(format!("patient '{id}' has no covariate row"));
                vec![1.0; width + 1]
            }
        }
    };

    let mut patients = Vec::new();
    match raw.source {
        RawSource::Genotypes(rows) => {
            // patient -> ordered list of (time, genotype, first line)
            let mut order: Vec<String> = Vec::new();
            let mut per: BTreeMap<String, Vec<(f64, Genotype, usize)>> = BTreeMap::new();
            for row in rows {
                if !row.time.is_finite() {
                    problems.push(format!("line {}: non-finite time", row.line));
                    continue;
                }
                let obs = per.entry(row.patient_id.clone()).or_insert_with(|| {
                    order.push(row.patient_id.clone());
                    Vec::new()
                });
                let start_new = match obs.last() {
                    None => true,
                    Some((t, _, _)) if row.time == *t => false,
                    Some((t, _, _)) if row.time > *t => true,
                    Some((t, _, _)) => {
                        let dup = obs.iter().any(|(u, _, _)| *u == row.time);
                        if dup {
                            problems.push(format!(
                                "line {}: duplicate (patient '{}', time {}) block",
                                row.line, row.patient_id, row.time
                            ));
                        } else {
                            problems.push(format!(
                                "line {}: time {} for patient '{}' decreases (previous {t})",
                                row.line, row.time, row.patient_id
                            ));
                        }
                        continue;
                    }
                };
                if start_new {
                    obs.push((row.time, Genotype::new(), row.line));
                }
                if let Some(site) = row.site_id {
                    if site.contains(',') {
                        problems.push(format!("line {}: site id contains a comma", row.line));
                    }
                    let g = &mut obs.last_mut().expect("just pushed").1;
                    if !g.insert(site.clone()) {
                        problems.push(format!(
                            "line {}: site '{site}' repeated for patient '{}' at time {}",
                            row.line, row.patient_id, row.time
                        ));
                    }
                }
            }
            for id in order {
                let obs = per.remove(&id).unwrap_or_default();
                if obs.len() < 2 {
                    problems.push(format!(
                        "patient '{id}' has {} observation(s); at least 2 required",
                        obs.len()
                    ));
                    continue;
                }
                let covs = lookup(&id, &mut problems);
                let observations: Vec<Observation> = obs
                    .into_iter()
                    .map(|(time, genotype, _)| Observation { time, genotype })
                    .collect();
                match intervals_from_observations(&observations) {
                    Ok(intervals) => patients.push(Patient {
                        id,
                        covariates: covs,
                        observations,
                        intervals,
                    }),
                    Err(e) => problems.push(format!("patient '{id}': {e}")),
                }
            }
        }
        RawSource::Reduced(rows) => {
            let mut order: Vec<String> = Vec::new();
            let mut per: BTreeMap<String, Vec<TimedInterval>> = BTreeMap::new();
            for row in rows {
                let ivs = per.entry(row.patient_id.clone()).or_insert_with(|| {
                    order.push(row.patient_id.clone());
                    Vec::new()
                });
                if !(row.t_start.is_finite() && row.t_end.is_finite()) {
                    problems.push(format!("line {}: non-finite time", row.line));
                    continue;
                }
                if let Some(prev) = ivs.last() {
                    if row.t_start == prev.t_start {
                        problems.push(format!(
                            "line {}: duplicate (patient '{}', time {})",
                            row.line, row.patient_id, row.t_start
                        ));
                        continue;
                    }
                    if row.t_start < prev.t_end {
                        problems.push(format!(
                            "line {}: interval starting at {} overlaps or precedes the previous one ending at {}",
                            row.line, row.t_start, prev.t_end
                        ));
                        continue;
                    }
                }
                match ReducedInterval::new(row.a, row.b, row.c_new, row.t_end - row.t_start) {
                    Ok(interval) => ivs.push(TimedInterval {
                        t_start: row.t_start,
                        t_end: row.t_end,
                        interval,
                    }),
                    Err(e) => problems.push(format!("line {}: {e}", row.line)),
                }
            }
            for id in order {
                let intervals = per.remove(&id).unwrap_or_default();
                if intervals.is_empty() {
                    problems.push(format!("patient '{id}' has no valid intervals"));
                    continue;
                }
                let covs = lookup(&id, &mut problems);
                patients.push(Patient {
                    id,
                    covariates: covs,
                    observations: Vec::new(),
                    intervals,
                });
            }
        }
    }

    if have_covariates {
        let seen: BTreeSet<&str> = patients.iter().map(|p| p.id.as_str()).collect();
        for row in &raw.covariates {
            if !seen.contains(row.patient_id.as_str())
                && !problems.iter().any(|p| p.contains(&format!("'{}'", row.patient_id)))
            {
                problems.push(format!(
                    "line {}: patient '{}' has covariates but no observations",
                    row.line, row.patient_id
                ));
            }
        }
    }

    if patients.is_empty() && problems.is_empty() {
        problems.push("dataset contains no patients".into());
    }
    if !problems.is_empty() {
        return Err(BdsError::Validation(problems));
    }
    Ok(PanelDataset {
        covariate_names: names,
        patients,
    })
}

fn intervals_from_observations(obs: &[Observation]) -> Result<Vec<TimedInterval>> {
    obs.windows(2)
        .map(|w| {
            let interval = reduce_pair(&w[0].genotype, &w[1].genotype, w[1].time - w[0].time)?;
            Ok(TimedInterval {
                t_start: w[0].time,
                t_end: w[1].time,
                interval,
            })
        })
        .collect()
}

impl PanelDataset {
    /// Build from in-memory observations; covariates must already include
    /// any intercept column named in `covariate_names`.
    pub fn from_observations(
        covariate_names: Vec<String>,
        inputs: Vec<PatientInput>,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        let mut patients = Vec::with_capacity(inputs.len());
        let mut ids = BTreeSet::new();
        for p in inputs {
            if !ids.insert(p.id.clone()) {
                problems.push(format!("duplicate patient id '{}'", p.id));
                continue;
            }
            if p.covariates.len() != covariate_names.len() {
                problems.push(format!(
                    "patient '{}' has {} covariates, expected {}",
                    p.id,
                    p.covariates.len(),
                    covariate_names.len()
                ));
                continue;
            }
            if p.observations.len() < 2 {
                problems.push(format!("patient '{}' has fewer than 2 observations", p.id));
                continue;
            }
            if p.observations.windows(2).any(|w| !(w[1].time > w[0].time)) {
                problems.push(format!("patient '{}' has non-increasing times", p.id));
                continue;
            }
            let intervals = intervals_from_observations(&p.observations)?;
            patients.push(Patient {
                id: p.id,
                covariates: p.covariates,
                observations: p.observations,
                intervals,
            });
        }
        if !problems.is_empty() {
            return Err(BdsError::Validation(problems));
        }
        Ok(Self {
            covariate_names,
            patients,
        })
    }

    /// Build directly from reduced intervals (one list per patient).
    pub fn from_intervals(
        covariate_names: Vec<String>,
        patients: Vec<(String, Vec<f64>, Vec<ReducedInterval>)>,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(patients.len());
        for (id, covariates, ivs) in patients {
            if covariates.len() != covariate_names.len() {
                return Err(BdsError::Validation(vec![format!(
                    "patient '{id}' has {} covariates, expected {}",
                    covariates.len(),
                    covariate_names.len()
                )]));
            }
            let mut t = 0.0;
            let intervals = ivs
                .into_iter()
                .map(|interval| {
                    let ti = TimedInterval {
                        t_start: t,
                        t_end: t + interval.dt,
                        interval,
                    };
                    t += interval.dt;
                    ti
                })
                .collect();
            out.push(Patient {
                id,
                covariates,
                observations: Vec::new(),
                intervals,
            });
        }
        Ok(Self {
            covariate_names,
            patients: out,
        })
    }

    pub fn n_intervals(&self) -> usize {
        self.patients.iter().map(|p| p.intervals.len()).sum()
    }

    pub fn intervals(&self) -> impl Iterator<Item = &ReducedInterval> {
        self.patients
            .iter()
            .flat_map(|p| p.intervals.iter().map(|t| &t.interval))
    }

    pub fn max_count(&self) -> usize {
        self.intervals().map(|iv| iv.max_count()).max().unwrap_or(0)
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            patients: self.patients.len(),
            observations: self
                .patients
                .iter()
                .map(|p| {
                    if p.observations.is_empty() {
                        p.intervals.len() + 1
                    } else {
                        p.observations.len()
                    }
                })
                .sum(),
            intervals: self.n_intervals(),
            no_change_intervals: self.intervals().filter(|iv| iv.is_no_change()).count(),
            fast_path_eligible: self.intervals().filter(|iv| iv.fast_path_eligible()).count(),
            extinct_start_intervals: self.intervals().filter(|iv| iv.a == 0).count(),
            max_count: self.max_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(sites: &[&str]) -> Genotype {
        sites.iter().copied().collect()
    }

    #[test]
    fn shift_and_birth_example() {
        let g1 = g(&["s1", "s2", "s3", "s4", "s5", "s6"]);
        let g2 = g(&["s1", "s2", "s3", "s4", "s5", "n1", "n2"]);
        let iv = reduce_pair(&g1, &g2, 1.0).unwrap();
        assert_eq!((iv.a, iv.b, iv.c_new), (6, 5, 2));
    }

    #[test]
    fn identity_and_disjoint_pairs() {
        let g1 = g(&["a", "b", "c"]);
        let iv = reduce_pair(&g1, &g1, 0.5).unwrap();
        assert_eq!((iv.a, iv.b, iv.c_new), (3, 3, 0));
        assert!(iv.fast_path_eligible());
        let iv = reduce_pair(&g1, &g(&["d"]), 0.5).unwrap();
        assert_eq!((iv.a, iv.b, iv.c_new), (3, 0, 1));
    }

    #[test]
    fn non_positive_dt_rejected() {
        let g1 = g(&["a"]);
        assert!(reduce_pair(&g1, &g1, 0.0).is_err());
        assert!(reduce_pair(&g1, &g1, -1.0).is_err());
    }

    #[test]
    fn covariate_rates() {
        let beta = RegressionCoefficients::new(vec![0.0188f64.ln()], vec![0.0], vec![0.0]).unwrap();
        let r = rates_from_covariates(&beta, &[1.0]).unwrap();
        assert!((r.lambda - 0.0188).abs() < 1e-15);
        assert_eq!((r.nu, r.mu), (1.0, 1.0));

        let x = -3.0;
        let beta =
            RegressionCoefficients::new(vec![0.0, 0.0], vec![0.0, 0.0], vec![x, 2.028]).unwrap();
        let r = rates_from_covariates(&beta, &[1.0, 1.0]).unwrap();
        assert!((r.mu / x.exp() - 7.599).abs() < 5e-4);

        assert!(rates_from_covariates(&beta, &[1.0]).is_err());
        let huge = RegressionCoefficients::new(vec![800.0], vec![0.0], vec![0.0]).unwrap();
        assert!(matches!(
            rates_from_covariates(&huge, &[1.0]),
            Err(BdsError::InvalidParameter(_))
        ));
    }

    #[test]
    fn model_spec_grammar() {
        let names: Vec<String> = ["1", "EI", "HIV", "DR"].iter().map(|s| s.to_string()).collect();
        let m = ModelSpec::parse("lambda~1, nu~1, mu~1+EI", &names).unwrap();
        assert_eq!(m.n_params(), 4);
        assert_eq!(m.mu, vec![0, 1]);
        let m = ModelSpec::parse("lambda~1+EI, mu~1+EI", &names).unwrap();
        assert_eq!(m.nu, vec![0]);
        assert_eq!(m.n_params(), 5);
        assert!(ModelSpec::parse("lambda~1+AGE", &names).is_err());
        assert!(ModelSpec::parse("lambda~1, lambda~1", &names).is_err());
        assert!(ModelSpec::parse("gamma~1", &names).is_err());
        assert!(ModelSpec::parse("lambda~1+", &names).is_err());
        assert_eq!(
            ModelSpec::parse("mu~1+EI", &names).unwrap().describe(),
            "lambda~1, nu~1, mu~1+EI"
        );
    }

    fn geno_row(line: usize, pid: &str, time: f64, site: Option<&str>) -> RawGenotypeRow {
        RawGenotypeRow {
            line,
            patient_id: pid.into(),
            time,
            site_id: site.map(String::from),
        }
    }

    #[test]
    fn validation_builds_intervals() {
        let raw = RawDataset {
            covariate_names: vec![],
            covariates: vec![],
            source: RawSource::Genotypes(vec![
                geno_row(2, "p1", 0.0, Some("a")),
                geno_row(3, "p1", 0.0, Some("b")),
                geno_row(4, "p1", 1.0, Some("a")),
                geno_row(5, "p1", 1.0, Some("b")),
                geno_row(6, "p2", 0.0, Some("x")),
                geno_row(7, "p2", 0.5, None),
            ]),
        };
        let ds = validate_dataset(raw).unwrap();
        assert_eq!(ds.covariate_names, vec!["1".to_string()]);
        let s = ds.summary();
        assert_eq!(s.patients, 2);
        assert_eq!(s.intervals, 2);
        assert_eq!(s.fast_path_eligible, 1);
        let iv = ds.patients[1].intervals[0].interval;
        assert_eq!((iv.a, iv.b, iv.c_new), (1, 0, 0));
    }

    #[test]
    fn validation_rejects_unsorted_and_single() {
        let raw = RawDataset {
            covariate_names: vec![],
            covariates: vec![],
            source: RawSource::Genotypes(vec![
                geno_row(2, "p1", 1.0, Some("a")),
                geno_row(3, "p1", 0.0, Some("a")),
                geno_row(4, "p2", 0.0, Some("a")),
            ]),
        };
        let err = validate_dataset(raw).unwrap_err();
        let BdsError::Validation(problems) = err else { panic!() };
        assert!(problems.iter().any(|p| p.contains("line 3") && p.contains("decreases")));
        assert!(problems.iter().any(|p| p.contains("'p2'")));
    }

    #[test]
    fn validation_rejects_covariate_width_mismatch() {
        let raw = RawDataset {
            covariate_names: vec!["z1".into(), "z2".into()],
            covariates: vec![RawCovariateRow {
                line: 2,
                patient_id: "p1".into(),
                values: vec![1.0],
            }],
            source: RawSource::Reduced(vec![RawReducedRow {
                line: 2,
                patient_id: "p1".into(),
                t_start: 0.0,
                t_end: 1.0,
                a: 3,
                b: 3,
                c_new: 0,
            }]),
        };
        assert!(matches!(validate_dataset(raw), Err(BdsError::Validation(_))));
    }

    #[test]
    fn reduced_rows_duplicate_time_rejected() {
        let row = |line, t0: f64, t1: f64| RawReducedRow {
            line,
            patient_id: "p".into(),
            t_start: t0,
            t_end: t1,
            a: 2,
            b: 2,
            c_new: 0,
        };
        let raw = RawDataset {
            covariate_names: vec![],
            covariates: vec![],
            source: RawSource::Reduced(vec![row(2, 0.0, 1.0), row(3, 0.0, 2.0)]),
        };
        assert!(validate_dataset(raw).is_err());
    }
}
