//! EM fitting of log-linear birth, shift and death rates.
//!
//! The E-step turns each interval into expected births, shifts, deaths and
//! particle time; the M-step maximizes the expected complete-data
//! log-likelihood `Σ_p Σ_rate [S_p x_p·β − P_p exp(x_p·β)]`, whose Hessian is
//! block diagonal across the three rates.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::FmCounts;
use crate::error::{BdsError, Result};
use crate::genfun::{GenFunOptions, H1Method};
use crate::model::{ModelSpec, PanelDataset, Rate, RateTriple, RegressionCoefficients};
use crate::spectral::{choose_grid_size, GridBundle, SpectralOptions};

/// Rates are never allowed below this value.
pub const RATE_FLOOR: f64 = 1e-12;

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 10,
            max_halvings: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Relative log-likelihood change at which EM stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Fixed grid size; chosen per rate/interval-length pair when `None`.
    pub grid: Option<usize>,
    /// Largest grid tried when growing automatically.
    pub max_grid: usize,
    /// Use `e^{−aθdt}` and `(0, 0, 0, a·dt)` for no-change intervals.
    pub accelerate: bool,
    pub genfun: GenFunOptions,
    pub newton: NewtonOptions,
    pub alias_tol: f64,
    /// Number of units in the BIC penalty; defaults to the interval count.
    pub n_units: Option<usize>,
    pub compute_se: bool,
    pub se_rel_step: f64,
    /// ODE relative tolerance while differentiating the likelihood.
    pub se_rtol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 1000,
            grid: None,
            max_grid: 1024,
            accelerate: false,
            genfun: GenFunOptions {
                rtol: 1e-10,
                atol: 1e-12,
                method: H1Method::ClosedForm,
                ..GenFunOptions::default()
            },
            newton: NewtonOptions::default(),
            alias_tol: 1e-6,
            n_units: None,
            compute_se: true,
            se_rel_step: 1e-4,
            se_rtol: 1e-12,
        }
    }
}

impl FitOptions {
    pub fn spectral(&self) -> SpectralOptions {
        SpectralOptions {
            genfun: self.genfun,
            alias_tol: self.alias_tol,
            ..SpectralOptions::default()
        }
    }
}

/// Expected sufficient statistics of one patient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientStats {
    pub births: f64,
    pub shifts: f64,
    pub deaths: f64,
    pub particle_time: f64,
}

impl PatientStats {
    pub fn count(&self, rate: Rate) -> f64 {
        match rate {
            Rate::Lambda => self.births,
            Rate::Nu => self.shifts,
            Rate::Mu => self.deaths,
        }
    }

    fn add(&mut self, o: &PatientStats) {
        self.births += o.births;
        self.shifts += o.shifts;
        self.deaths += o.deaths;
        self.particle_time += o.particle_time;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedSuffStats {
    pub per_patient: Vec<PatientStats>,
}

impl ExpectedSuffStats {
    pub fn totals(&self) -> PatientStats {
        let mut t = PatientStats::default();
        for p in &self.per_patient {
            t.add(p);
        }
        t
    }
}

/// Per-rate design rows, one per patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub rows: [Vec<Vec<f64>>; 3],
}

impl Design {
    pub fn new(data: &PanelDataset, model: &ModelSpec) -> Self {
        let rows = Rate::ALL.map(|rate| {
            data.patients
                .iter()
                .map(|p| model.design_row(rate, &p.covariates))
                .collect()
        });
        Self { rows }
    }

    fn block(&self, rate: Rate) -> &[Vec<f64>] {
        &self.rows[rate as usize]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn block_objective(x: &[Vec<f64>], stats: &[PatientStats], rate: Rate, beta: &[f64]) -> f64 {
    x.iter()
        .zip(stats)
        .map(|(row, s)| {
            let eta = dot(row, beta);
            s.count(rate) * eta - s.particle_time * eta.exp()
        })
        .sum()
}

fn block_gradient(x: &[Vec<f64>], stats: &[PatientStats], rate: Rate, beta: &[f64]) -> DVector<f64> {
    let mut g = DVector::zeros(beta.len());
    for (row, s) in x.iter().zip(stats) {
        let w = s.count(rate) - s.particle_time * dot(row, beta).exp();
        for (gi, xi) in g.iter_mut().zip(row) {
            *gi += w * xi;
        }
    }
    g
}

fn block_hessian(x: &[Vec<f64>], stats: &[PatientStats], beta: &[f64]) -> DMatrix<f64> {
    let k = beta.len();
    let mut h = DMatrix::zeros(k, k);
    for (row, s) in x.iter().zip(stats) {
        let w = s.particle_time * dot(row, beta).exp();
        for i in 0..k {
            for j in 0..k {
                h[(i, j)] -= w * row[i] * row[j];
            }
        }
    }
    h
}

/// Expected complete-data log-likelihood, up to a constant.
pub fn q_objective(design: &Design, stats: &ExpectedSuffStats, beta: &RegressionCoefficients) -> f64 {
    Rate::ALL
        .iter()
        .map(|&r| block_objective(design.block(r), &stats.per_patient, r, beta.block(r)))
        .sum()
}

/// Gradient of [`q_objective`] in flattened `(λ, ν, μ)` order.
pub fn q_gradient(design: &Design, stats: &ExpectedSuffStats, beta: &RegressionCoefficients) -> Vec<f64> {
    Rate::ALL
        .iter()
        .flat_map(|&r| {
            block_gradient(design.block(r), &stats.per_patient, r, beta.block(r))
                .iter()
                .copied()
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Full Hessian of [`q_objective`]; cross-rate blocks are exactly zero.
pub fn q_hessian(design: &Design, stats: &ExpectedSuffStats, beta: &RegressionCoefficients) -> DMatrix<f64> {
    let k = beta.len();
    let mut h = DMatrix::zeros(k, k);
    let mut off = 0;
    for r in Rate::ALL {
        let b = block_hessian(design.block(r), &stats.per_patient, beta.block(r));
        let w = b.nrows();
        h.view_mut((off, off), (w, w)).copy_from(&b);
        off += w;
    }
    h
}

fn least_squares(x: &[Vec<f64>], y: &[f64], k: usize) -> Vec<f64> {
    if k == 0 || x.is_empty() {
        return vec![0.0; k];
    }
    let xm = DMatrix::from_fn(x.len(), k, |i, j| x[i][j]);
    let yv = DVector::from_column_slice(y);
    let sol = xm.svd(true, true).solve(&yv, 1e-12).unwrap_or_else(|_| DVector::zeros(k));
    sol.iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutput {
    pub beta: RegressionCoefficients,
    /// Blocks with no expected events, set to the rate floor.
    pub floored: Vec<Rate>,
    pub newton_iterations: [usize; 3],
}

/// Newton–Raphson M-step from `beta_init`, block by block.
pub fn m_step(
    design: &Design,
    stats: &ExpectedSuffStats,
    beta_init: &RegressionCoefficients,
    opts: &NewtonOptions,
) -> Result<MStepOutput> {
    let mut beta = beta_init.clone();
    let mut floored = Vec::new();
    let mut iters = [0; 3];
    for rate in Rate::ALL {
        let x = design.block(rate);
        let s = &stats.per_patient;
        let total: f64 = s.iter().map(|p| p.count(rate)).sum();
        let k = beta.block(rate).len();
        if total <= 0.0 {
            let target = vec![RATE_FLOOR.ln(); x.len()];
            *beta.block_mut(rate) = least_squares(x, &target, k);
            floored.push(rate);
            continue;
        }
        let mut b = beta.block(rate).to_vec();
        let mut obj = block_objective(x, s, rate, &b);
        for it in 0..opts.max_iter {
            let g = block_gradient(x, s, rate, &b);
            if g.amax() < opts.grad_tol {
                break;
            }
            iters[rate as usize] = it + 1;
            let neg_h = -block_hessian(x, s, &b);
            let step = neg_h
                .cholesky()
                .map(|c| c.solve(&g))
                .ok_or(BdsError::SingularHessian { block: rate.name() })?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..=opts.max_halvings {
                let cand: Vec<f64> = b.iter().zip(step.iter()).map(|(bi, di)| bi + t * di).collect();
                let val = block_objective(x, s, rate, &cand);
                if val.is_finite() && val >= obj {
                    b = cand;
                    obj = val;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(BdsError::InvalidParameter(format!(
                "non-finite M-step update in the {} block",
                rate.name()
            )));
        }
        *beta.block_mut(rate) = b;
    }
    Ok(MStepOutput {
        beta,
        floored,
        newton_iterations: iters,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStepOutput {
    pub stats: ExpectedSuffStats,
    pub loglik: f64,
}

type BundleKey = (u64, u64, u64, u64);

fn key(r: &RateTriple, dt: f64) -> BundleKey {
    (r.lambda.to_bits(), r.nu.to_bits(), r.mu.to_bits(), dt.to_bits())
}

struct BundleJob {
    rates: RateTriple,
    dt: f64,
    max_a: usize,
    max_count: usize,
}

fn build_bundle(job: &BundleJob, with_moments: bool, opts: &FitOptions) -> Result<GridBundle> {
    let spec = opts.spectral();
    let mut n = opts.grid.unwrap_or_else(|| choose_grid_size(job.max_count));
    loop {
        let attempt = GridBundle::new(&job.rates, job.dt, n, with_moments, &spec)
            .and_then(|b| b.check_alias(job.max_a, &spec).map(|_| b));
        match attempt {
            Err(BdsError::Aliasing { .. }) if opts.grid.is_none() && n < opts.max_grid => n *= 2,
            other => return other,
        }
    }
}

/// Per-rate linear predictors must stay representable.
pub fn patient_rates(
    data: &PanelDataset,
    model: &ModelSpec,
    beta: &RegressionCoefficients,
) -> Result<Vec<RateTriple>> {
    data.patients
        .iter()
        .map(|p| model.rates_for(beta, &p.covariates))
        .collect()
}

fn evaluate(
    data: &PanelDataset,
    model: &ModelSpec,
    beta: &RegressionCoefficients,
    opts: &FitOptions,
    with_moments: bool,
) -> Result<EStepOutput> {
    let rates = patient_rates(data, model, beta)?;
    let mut jobs: HashMap<BundleKey, BundleJob> = HashMap::new();
    let mut order: Vec<BundleKey> = Vec::new();
    for (p, r) in data.patients.iter().zip(&rates) {
        for ti in &p.intervals {
            let iv = ti.interval;
            if iv.a == 0 || (opts.accelerate && iv.fast_path_eligible()) {
                continue;
            }
            let k = key(r, iv.dt);
            let job = jobs.entry(k).or_insert_with(|| {
                order.push(k);
                BundleJob {
                    rates: *r,
                    dt: iv.dt,
                    max_a: 0,
                    max_count: 0,
                }
            });
            job.max_a = job.max_a.max(iv.a);
            job.max_count = job.max_count.max(iv.max_count());
        }
    }
    let built: Vec<GridBundle> = order
        .par_iter()
        .map(|k| build_bundle(&jobs[k], with_moments, opts))
        .collect::<Result<_>>()?;
    let index: HashMap<BundleKey, usize> = order.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let spec = opts.spectral();

    let per: Vec<(PatientStats, f64)> = data
        .patients
        .par_iter()
        .zip(rates.par_iter())
        .map(|(p, r)| {
            let mut s = PatientStats::default();
            let mut ll = 0.0;
            for (j, ti) in p.intervals.iter().enumerate() {
                let iv = ti.interval;
                if iv.a == 0 {
                    if iv.b != 0 || iv.c_new != 0 {
                        return Err(BdsError::ImpossibleTransition {
                            context: format!(
                                "patient '{}' interval {j}: (0, 0) -> (0, {})",
                                p.id, iv.c_new
                            ),
                            prob: 0.0,
                        });
                    }
                    continue;
                }
                if opts.accelerate && iv.fast_path_eligible() {
                    ll -= iv.a as f64 * r.theta() * iv.dt;
                    s.particle_time += iv.a as f64 * iv.dt;
                    continue;
                }
                let bundle = &built[index[&key(r, iv.dt)]];
                let e = bundle.expectations(&iv, &spec).map_err(|e| match e {
                    BdsError::ImpossibleTransition { context, prob } => {
                        BdsError::ImpossibleTransition {
                            context: format!("patient '{}' interval {j}: {context}", p.id),
                            prob,
                        }
                    }
                    other => other,
                })?;
                ll += e.prob.ln();
                s.births += e.e_birth;
                s.shifts += e.e_shift;
                s.deaths += e.e_death;
                s.particle_time += e.e_time;
            }
            Ok((s, ll))
        })
        .collect::<Result<_>>()?;

    let loglik = per.iter().map(|x| x.1).sum();
    Ok(EStepOutput {
        stats: ExpectedSuffStats {
            per_patient: per.into_iter().map(|x| x.0).collect(),
        },
        loglik,
    })
}

/// Expected sufficient statistics and the observed log-likelihood at `beta`.
pub fn e_step(
    data: &PanelDataset,
    model: &ModelSpec,
    beta: &RegressionCoefficients,
    opts: &FitOptions,
) -> Result<EStepOutput> {
    evaluate(data, model, beta, opts, true)
}

/// Observed-data log-likelihood of the branching approximation.
pub fn observed_loglik(
    data: &PanelDataset,
    model: &ModelSpec,
    beta: &RegressionCoefficients,
    opts: &FitOptions,
) -> Result<f64> {
    Ok(evaluate(data, model, beta, opts, false)?.loglik)
}

/// Moment start: naive event counts over average population exposure.
pub fn moment_start(data: &PanelDataset, model: &ModelSpec) -> RegressionCoefficients {
    let design = Design::new(data, model);
    let mut counts = [0.0f64; 3];
    let mut exposure = 0.0;
    for iv in data.intervals() {
        let lost = iv.lost();
        let gained = iv.gained();
        let shifts = lost.min(gained);
        counts[0] += (gained - shifts) as f64;
        counts[1] += shifts as f64;
        counts[2] += (lost - shifts) as f64;
        exposure += (iv.a + iv.b + iv.c_new) as f64 / 2.0 * iv.dt;
    }
    let exposure = exposure.max(1e-12);
    let mut beta = RegressionCoefficients::zeros(model.widths());
    for rate in Rate::ALL {
        let target = ((counts[rate as usize] + 0.5) / exposure).ln();
        let x = design.block(rate);
        let y = vec![target; x.len()];
        *beta.block_mut(rate) = least_squares(x, &y, model.widths()[rate as usize]);
    }
    beta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub loglik: f64,
    /// Change from the previous iteration; absent for the first record.
    pub delta: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Em,
    Fm,
    Direct,
}

impl FitMethod {
    pub fn name(self) -> &'static str {
        match self {
            FitMethod::Em => "em",
            FitMethod::Fm => "fm",
            FitMethod::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEstimate {
    pub rate: Rate,
    pub term: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: FitMethod,
    pub model: String,
    pub beta_hat: RegressionCoefficients,
    pub coefficients: Vec<CoefficientEstimate>,
    pub loglik: f64,
    pub trace: Vec<TraceRecord>,
    pub std_errors: Option<Vec<f64>>,
    pub wald_ci_95: Option<Vec<[f64; 2]>>,
    pub se_diagnostics: Option<String>,
    pub n_iterations: usize,
    pub converged: bool,
    pub k: usize,
    pub n_units: usize,
    pub bic: f64,
    /// Rates forced to the floor because no events were expected.
    pub floored: Vec<Rate>,
    /// Rates whose fitted values sit close to zero.
    pub near_boundary: Vec<Rate>,
    pub warnings: Vec<String>,
    pub fm_counts: Option<FmCounts>,
}

impl FitResult {
    /// Rate-scale point estimate and Wald interval, for intercept-only blocks.
    pub fn rate_estimate(&self, rate: Rate) -> Option<(f64, Option<(f64, f64)>)> {
        let rows: Vec<&CoefficientEstimate> =
            self.coefficients.iter().filter(|c| c.rate == rate).collect();
        if rows.len() != 1 || rows[0].term != crate::model::INTERCEPT {
            return None;
        }
        let c = rows[0];
        let ci = c.ci_low.zip(c.ci_high).map(|(lo, hi)| (lo.exp(), hi.exp()));
        Some((c.estimate.exp(), ci))
    }

    pub fn coefficient(&self, rate: Rate, term: &str) -> Option<&CoefficientEstimate> {
        self.coefficients
            .iter()
            .find(|c| c.rate == rate && c.term == term)
    }
}

/// `−2L + k ln(n)`.
pub fn bic(loglik: f64, k: usize, n_units: usize) -> f64 {
    -2.0 * loglik + k as f64 * (n_units as f64).ln()
}

/// Pieces shared by every fitting method.
pub struct FitParts {
    pub method: FitMethod,
    pub beta_hat: RegressionCoefficients,
    pub loglik: f64,
    pub trace: Vec<TraceRecord>,
    pub n_iterations: usize,
    pub converged: bool,
    pub se: Option<SeReport>,
    pub floored: Vec<Rate>,
    pub warnings: Vec<String>,
    pub fm_counts: Option<FmCounts>,
}

pub fn assemble_fit(
    data: &PanelDataset,
    model: &ModelSpec,
    parts: FitParts,
    n_units: Option<usize>,
) -> FitResult {
    let k = model.n_params();
    let n_units = n_units.unwrap_or_else(|| data.n_intervals());
    let se_vec = parts.se.as_ref().and_then(|s| s.std_errors.clone());
    let mut coefficients = Vec::with_capacity(k);
    let mut idx = 0;
    for rate in Rate::ALL {
        for (term, &est) in model.term_names(rate).into_iter().zip(parts.beta_hat.block(rate)) {
            let se = se_vec.as_ref().map(|v| v[idx]);
            coefficients.push(CoefficientEstimate {
                rate,
                term,
                estimate: est,
                std_error: se,
                ci_low: se.map(|s| est - Z95 * s),
                ci_high: se.map(|s| est + Z95 * s),
            });
            idx += 1;
        }
    }
    let mut near_boundary = Vec::new();
    if let Ok(rates) = patient_rates(data, model, &parts.beta_hat) {
        for rate in Rate::ALL {
            let mean = rates
                .iter()
                .map(|r| match rate {
                    Rate::Lambda => r.lambda,
                    Rate::Nu => r.nu,
                    Rate::Mu => r.mu,
                })
                .sum::<f64>()
                / rates.len().max(1) as f64;
            if mean < 1e-6 {
                near_boundary.push(rate);
            }
        }
    }
    let mut warnings = parts.warnings;
    if !parts.floored.is_empty() {
        warnings.push(format!(
            "rates floored at {RATE_FLOOR:e} for lack of events: {}",
            parts.floored.iter().map(|r| r.name()).collect::<Vec<_>>().join(", ")
        ));
    }
    if !near_boundary.is_empty() {
        warnings.push(format!(
            "estimates near the zero-rate boundary, standard errors unreliable: {}",
            near_boundary.iter().map(|r| r.name()).collect::<Vec<_>>().join(", ")
        ));
    }
    if !parts.converged {
        warnings.push(format!("did not converge after {} iterations", parts.n_iterations));
    }
    FitResult {
        method: parts.method,
        model: model.describe(),
        beta_hat: parts.beta_hat,
        coefficients,
        loglik: parts.loglik,
        trace: parts.trace,
        wald_ci_95: parts.se.as_ref().and_then(|s| s.wald_ci_95.clone()),
        se_diagnostics: parts.se.and_then(|s| s.diagnostics),
        std_errors: se_vec,
        n_iterations: parts.n_iterations,
        converged: parts.converged,
        k,
        n_units,
        bic: bic(parts.loglik, k, n_units),
        floored: parts.floored,
        near_boundary,
        warnings,
        fm_counts: parts.fm_counts,
    }
}

/// Run EM from `beta0` (or the moment start). `observer` sees every trace
/// record as it is produced.
pub fn fit_em(
    data: &PanelDataset,
    model: &ModelSpec,
    beta0: Option<&RegressionCoefficients>,
    opts: &FitOptions,
    mut observer: Option<&mut dyn FnMut(&TraceRecord)>,
) -> Result<FitResult> {
    let start = Instant::now();
    let design = Design::new(data, model);
    let mut beta = match beta0 {
        Some(b) => {
            if b.widths() != model.widths() {
                return Err(BdsError::InvalidParameter(format!(
                    "starting coefficients have widths {:?}, model needs {:?}",
                    b.widths(),
                    model.widths()
                )));
            }
            b.clone()
        }
        None => moment_start(data, model),
    };
    let mut trace = Vec::new();
    let mut prev: Option<f64> = None;
    let mut converged = false;
    let mut floored = Vec::new();
    let mut loglik = f64::NEG_INFINITY;
    let mut iterations = 0;
    for iter in 0..=opts.max_iter {
        let out = e_step(data, model, &beta, opts)?;
        loglik = out.loglik;
        let rec = TraceRecord {
            iter,
            loglik,
            delta: prev.map(|p| loglik - p),
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(obs) = observer.as_deref_mut() {
            obs(&rec);
        }
        trace.push(rec);
        iterations = iter;
        if let Some(p) = prev {
            if (loglik - p).abs() / (loglik.abs() + 1.0) < opts.tol {
                converged = true;
                break;
            }
        }
        if iter == opts.max_iter {
            break;
        }
        let m = m_step(&design, &out.stats, &beta, &opts.newton)?;
        floored = m.floored;
        beta = m.beta;
        prev = Some(loglik);
    }
    let se = opts
        .compute_se
        .then(|| standard_errors(data, model, &beta, opts));
    Ok(assemble_fit(
        data,
        model,
        FitParts {
            method: FitMethod::Em,
            beta_hat: beta,
            loglik,
            trace,
            n_iterations: iterations,
            converged,
            se,
            floored,
            warnings: Vec::new(),
            fm_counts: None,
        },
        opts.n_units,
    ))
}

/// Central-difference Hessian with steps `rel_step · max(|x_i|, 1)`.
pub fn numerical_hessian<F>(f: F, x: &[f64], rel_step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let k = x.len();
    let h: Vec<f64> = x.iter().map(|v| rel_step * v.abs().max(1.0)).collect();
    let f0 = f(x)?;
    let eval = |di: &[(usize, f64)]| -> Result<f64> {
        let mut y = x.to_vec();
        for &(i, d) in di {
            y[i] += d;
        }
        f(&y)
    };
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
    let entries: Vec<((usize, usize), f64)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let v = if i == j {
                let fp = eval(&[(i, h[i])])?;
                let fm = eval(&[(i, -h[i])])?;
                (fp - 2.0 * f0 + fm) / (h[i] * h[i])
            } else {
                let fpp = eval(&[(i, h[i]), (j, h[j])])?;
                let fpm = eval(&[(i, h[i]), (j, -h[j])])?;
                let fmp = eval(&[(i, -h[i]), (j, h[j])])?;
                let fmm = eval(&[(i, -h[i]), (j, -h[j])])?;
                (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
            };
            Ok(((i, j), v))
        })
        .collect::<Result<_>>()?;
    let mut hm = DMatrix::zeros(k, k);
    for ((i, j), v) in entries {
        hm[(i, j)] = v;
        hm[(j, i)] = v;
    }
    Ok(hm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeReport {
    pub std_errors: Option<Vec<f64>>,
    pub wald_ci_95: Option<Vec<[f64; 2]>>,
    pub diagnostics: Option<String>,
}

/// Standard errors from the inverse of a negative log-likelihood Hessian.
pub fn se_from_hessian(hessian: &DMatrix<f64>, estimate: &[f64]) -> SeReport {
    let neg = -hessian;
    match neg.clone().cholesky() {
        Some(ch) => {
            let cov = ch.inverse();
            let se: Vec<f64> = (0..estimate.len()).map(|i| cov[(i, i)].sqrt()).collect();
            let ci = estimate
                .iter()
                .zip(&se)
                .map(|(b, s)| [b - Z95 * s, b + Z95 * s])
                .collect();
            SeReport {
                std_errors: Some(se),
                wald_ci_95: Some(ci),
                diagnostics: None,
            }
        }
        None => {
            let eig = neg.symmetric_eigen();
            let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            SeReport {
                std_errors: None,
                wald_ci_95: None,
                diagnostics: Some(format!(
                    "observed information is not positive definite (eigenvalues in [{min:.3e}, {max:.3e}]); standard errors unavailable"
                )),
            }
        }
    }
}

/// Wald standard errors at `beta_hat` from the numerical observed information.
pub fn standard_errors(
    data: &PanelDataset,
    model: &ModelSpec,
    beta_hat: &RegressionCoefficients,
    opts: &FitOptions,
) -> SeReport {
    let mut tight = *opts;
    tight.genfun.rtol = opts.se_rtol;
    tight.genfun.atol = opts.se_rtol * 1e-2;
    let widths = beta_hat.widths();
    let x = beta_hat.flatten();
    let f = |v: &[f64]| -> Result<f64> {
        let b = RegressionCoefficients::unflatten(v, widths)?;
        observed_loglik(data, model, &b, &tight)
    };
    match numerical_hessian(f, &x, opts.se_rel_step) {
        Ok(h) => se_from_hessian(&h, &x),
        Err(e) => SeReport {
            std_errors: None,
            wald_ci_95: None,
            diagnostics: Some(format!("likelihood evaluation failed near the optimum: {e}")),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ReducedInterval, INTERCEPT};

    fn intercept_data(ivs: Vec<ReducedInterval>) -> (PanelDataset, ModelSpec) {
        let names = vec![INTERCEPT.to_string()];
        let ds = PanelDataset::from_intervals(names.clone(), vec![("p".into(), vec![1.0], ivs)]).unwrap();
        let model = ModelSpec::intercept_only(&names).unwrap();
        (ds, model)
    }

    #[test]
    fn fast_path_loglik() {
        let (ds, model) = intercept_data(vec![ReducedInterval::new(12, 12, 0, 1.0).unwrap()]);
        let rates = RateTriple::new(0.0188, 0.00268, 0.0147).unwrap();
        let beta = RegressionCoefficients::from_rates(rates);
        let opts = FitOptions {
            accelerate: true,
            ..Default::default()
        };
        let ll = observed_loglik(&ds, &model, &beta, &opts).unwrap();
        assert!((ll - (-12.0 * rates.theta())).abs() < 1e-12);
        assert!((ll + 0.4344).abs() < 12.0 * 5e-5);
    }

    #[test]
    fn empty_dataset_loglik_zero() {
        let names = vec![INTERCEPT.to_string()];
        let ds = PanelDataset::from_intervals(names.clone(), vec![]).unwrap();
        let model = ModelSpec::intercept_only(&names).unwrap();
        let beta = RegressionCoefficients::from_rates(RateTriple::new(0.1, 0.1, 0.1).unwrap());
        assert_eq!(observed_loglik(&ds, &model, &beta, &FitOptions::default()).unwrap(), 0.0);
    }

    #[test]
    fn fast_path_stats() {
        let (ds, model) = intercept_data(vec![
            ReducedInterval::new(7, 7, 0, 2.0).unwrap(),
            ReducedInterval::new(0, 0, 0, 1.0).unwrap(),
        ]);
        let beta = RegressionCoefficients::from_rates(RateTriple::new(0.1, 0.05, 0.1).unwrap());
        let opts = FitOptions {
            accelerate: true,
            ..Default::default()
        };
        let out = e_step(&ds, &model, &beta, &opts).unwrap();
        let s = out.stats.per_patient[0];
        assert_eq!((s.births, s.shifts, s.deaths, s.particle_time), (0.0, 0.0, 0.0, 14.0));
    }

    #[test]
    fn intercept_m_step_closed_form() {
        let (ds, model) = intercept_data(vec![ReducedInterval::new(3, 3, 0, 1.0).unwrap()]);
        let design = Design::new(&ds, &model);
        let stats = ExpectedSuffStats {
            per_patient: vec![PatientStats {
                births: 2.5,
                shifts: 0.75,
                deaths: 4.0,
                particle_time: 31.0,
            }],
        };
        let start = RegressionCoefficients::from_rates(RateTriple::new(1.0, 1.0, 1.0).unwrap());
        let opts = NewtonOptions {
            max_iter: 50,
            ..Default::default()
        };
        let out = m_step(&design, &stats, &start, &opts).unwrap();
        assert!((out.beta.beta_lambda[0].exp() - 2.5 / 31.0).abs() < 1e-10);
        assert!((out.beta.beta_nu[0].exp() - 0.75 / 31.0).abs() < 1e-10);
        assert!((out.beta.beta_mu[0].exp() - 4.0 / 31.0).abs() < 1e-10);
    }

    #[test]
    fn zero_counts_floor() {
        let (ds, model) = intercept_data(vec![ReducedInterval::new(3, 3, 0, 1.0).unwrap()]);
        let design = Design::new(&ds, &model);
        let stats = ExpectedSuffStats {
            per_patient: vec![PatientStats {
                particle_time: 3.0,
                ..Default::default()
            }],
        };
        let start = RegressionCoefficients::from_rates(RateTriple::new(1.0, 1.0, 1.0).unwrap());
        let out = m_step(&design, &stats, &start, &NewtonOptions::default()).unwrap();
        assert_eq!(out.floored.len(), 3);
        assert!((out.beta.beta_mu[0] - RATE_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn bic_formula() {
        assert_eq!(bic(-10.0, 0, 50), 20.0);
        assert!((bic(-124.472, 4, 412) - (248.944 + 4.0 * 412f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn quadratic_hessian_stub() {
        let curv = [4.0, 9.0];
        let f = |x: &[f64]| -> Result<f64> {
            Ok(-0.5 * (curv[0] * (x[0] - 1.0).powi(2) + curv[1] * (x[1] + 2.0).powi(2)) - 0.3 * (x[0] - 1.0) * (x[1] + 2.0))
        };
        let h = numerical_hessian(f, &[1.0, -2.0], 1e-4).unwrap();
        let se = se_from_hessian(&h, &[1.0, -2.0]);
        let det = curv[0] * curv[1] - 0.09;
        let want = [(curv[1] / det).sqrt(), (curv[0] / det).sqrt()];
        let got = se.std_errors.unwrap();
        assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6);
    }

    #[test]
    fn non_definite_hessian_reports_diagnostics() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let se = se_from_hessian(&h, &[0.0, 0.0]);
        assert!(se.std_errors.is_none());
        assert!(se.diagnostics.unwrap().contains("not positive definite"));
    }

    #[test]
    fn moment_start_intercepts() {
        let (ds, model) = intercept_data(vec![
            ReducedInterval::new(4, 3, 2, 1.0).unwrap(),
            ReducedInterval::new(5, 5, 0, 1.0).unwrap(),
        ]);
        let b = moment_start(&ds, &model);
        let exposure = (4.0 + 3.0 + 2.0) / 2.0 + 5.0;
        assert!((b.beta_lambda[0] - (1.5f64 / exposure).ln()).abs() < 1e-12);
        assert!((b.beta_nu[0] - (1.5f64 / exposure).ln()).abs() < 1e-12);
        assert!((b.beta_mu[0] - (0.5f64 / exposure).ln()).abs() < 1e-12);
    }
}
