//! Comparison estimators: frequent monitoring (at most one event per
//! interval) and derivative-free maximization of the observed likelihood.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::{
    assemble_fit, observed_loglik, se_from_hessian, FitMethod, FitOptions, FitParts, FitResult,
    TraceRecord, RATE_FLOOR,
};
use crate::error::{BdsError, Result};
use crate::model::{ModelSpec, PanelDataset, Rate, RateTriple, ReducedInterval, RegressionCoefficients};

/// How the frequent-monitoring reading explains an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FmEvent {
    None,
    Birth,
    Shift,
    Death,
}

/// Classification of `iv`; `None` when more than one change is needed.
pub fn classify(iv: &ReducedInterval) -> Option<FmEvent> {
    match (iv.lost(), iv.gained()) {
        (0, 0) => Some(FmEvent::None),
        (0, 1) if iv.a > 0 => Some(FmEvent::Birth),
        (1, 1) => Some(FmEvent::Shift),
        (1, 0) => Some(FmEvent::Death),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FmCounts {
    pub n_none: usize,
    pub n_birth: usize,
    pub n_shift: usize,
    pub n_death: usize,
    pub dropped: usize,
}

impl FmCounts {
    pub fn from_data(data: &PanelDataset) -> Self {
        let mut c = FmCounts::default();
        for iv in data.intervals() {
            match classify(iv) {
                Some(FmEvent::None) => c.n_none += 1,
                Some(FmEvent::Birth) => c.n_birth += 1,
                Some(FmEvent::Shift) => c.n_shift += 1,
                Some(FmEvent::Death) => c.n_death += 1,
                None => c.dropped += 1,
            }
        }
        c
    }

    pub fn usable(&self) -> usize {
        self.n_none + self.n_birth + self.n_shift + self.n_death
    }
}

fn event_shape(event: FmEvent, k: usize) -> (usize, i64) {
    match event {
        FmEvent::None => (k, 0),
        FmEvent::Birth => (k + 1, -1),
        FmEvent::Shift => (k, 0),
        FmEvent::Death => (k - 1, 1),
    }
}

/// `ln((e^z − 1)/z)`.
fn psi(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        z / 2.0 + z * z / 24.0
    } else if z > 0.0 {
        z + (-(-z).exp_m1() / z).ln()
    } else {
        (z.exp_m1() / z).ln()
    }
}

fn psi1(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 12.0 - z * z * z / 720.0
    } else {
        1.0 / -(-z).exp_m1() - 1.0 / z
    }
}

fn psi2(z: f64) -> f64 {
    if z.abs() < 1e-2 {
        1.0 / 12.0 - z * z / 240.0
    } else {
        let e = (-z).exp();
        let d = (-z).exp_m1();
        1.0 / (z * z) - e / (d * d)
    }
}

/// Log-probability that exactly the event `event` (or nothing) happens over
/// `dt` among `k` particles.
pub fn fm_event_logprob(event: FmEvent, k: usize, dt: f64, rates: &RateTriple) -> f64 {
    let theta = rates.theta();
    if event == FmEvent::None {
        return -(k as f64) * theta * dt;
    }
    let rho = match event {
        FmEvent::Birth => rates.lambda,
        FmEvent::Shift => rates.nu,
        _ => rates.mu,
    };
    let (k2, delta) = event_shape(event, k);
    (k as f64 * rho * dt).ln() - k2 as f64 * theta * dt + psi(-(delta as f64) * theta * dt)
}

/// FM probability of `(a, 0) → (b, c_new)`; zero for multi-change intervals.
pub fn fm_transition_prob(iv: &ReducedInterval, rates: &RateTriple) -> f64 {
    match classify(iv) {
        Some(e) => fm_event_logprob(e, iv.a, iv.dt, rates).exp(),
        None if iv.a == 0 && iv.b == 0 && iv.c_new == 0 => 1.0,
        None => 0.0,
    }
}

/// FM log-likelihood over usable intervals.
pub fn fm_loglik(data: &PanelDataset, rates: &RateTriple) -> f64 {
    data.intervals()
        .filter_map(|iv| classify(iv).map(|e| fm_event_logprob(e, iv.a, iv.dt, rates)))
        .sum()
}

/// `ℓ(η) = Σ n_c η_c + h(θ)` on log-rates, with value, gradient and Hessian.
struct FmObjective {
    n: [f64; 3],
    /// `(k, k', δ, dt)` of every usable interval.
    terms: Vec<(f64, f64, f64, f64)>,
    constant: f64,
}

impl FmObjective {
    fn new(data: &PanelDataset) -> Self {
        let mut n = [0.0; 3];
        let mut terms = Vec::new();
        let mut constant = 0.0;
        for iv in data.intervals() {
            let Some(e) = classify(iv) else { continue };
            if iv.a == 0 {
                continue;
            }
            let (k2, delta) = event_shape(e, iv.a);
            match e {
                FmEvent::Birth => n[0] += 1.0,
                FmEvent::Shift => n[1] += 1.0,
                FmEvent::Death => n[2] += 1.0,
                FmEvent::None => {}
            }
            if e != FmEvent::None {
                constant += (iv.a as f64 * iv.dt).ln();
            }
            terms.push((iv.a as f64, k2 as f64, delta as f64, iv.dt));
        }
        Self { n, terms, constant }
    }

    fn h(&self, theta: f64) -> (f64, f64, f64) {
        let (mut h0, mut h1, mut h2) = (0.0, 0.0, 0.0);
        for &(k, k2, delta, dt) in &self.terms {
            if delta == 0.0 && k == k2 {
                h0 -= k2 * theta * dt;
                h1 -= k2 * dt;
                continue;
            }
            let z = -delta * theta * dt;
            h0 += -k2 * theta * dt + psi(z);
            h1 += -k2 * dt - delta * dt * psi1(z);
            h2 += delta * delta * dt * dt * psi2(z);
        }
        (h0, h1, h2)
    }

    fn eval(&self, eta: &[f64; 3]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let rho = eta.map(f64::exp);
        let theta: f64 = rho.iter().sum();
        let (h0, h1, h2) = self.h(theta);
        let val = self.constant + (0..3).map(|c| self.n[c] * eta[c]).sum::<f64>() + h0;
        let g = DVector::from_fn(3, |c, _| self.n[c] + h1 * rho[c]);
        let hm = DMatrix::from_fn(3, 3, |c, d| {
            h2 * rho[c] * rho[d] + if c == d { h1 * rho[c] } else { 0.0 }
        });
        (val, g, hm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FmOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub n_units: Option<usize>,
}

impl Default for FmOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            max_iter: 200,
            n_units: None,
        }
    }
}

/// Maximum-likelihood rates under frequent monitoring, by Newton on log-rates.
pub fn fit_fm(data: &PanelDataset, opts: &FmOptions) -> Result<FitResult> {
    let start = Instant::now();
    let counts = FmCounts::from_data(data);
    if counts.usable() == 0 {
        return Err(BdsError::NoUsableData(format!(
            "all {} intervals need more than one change",
            counts.dropped
        )));
    }
    let model = ModelSpec::intercept_only(&data.covariate_names)?;
    let obj = FmObjective::new(data);
    let exposure: f64 = obj.terms.iter().map(|t| t.0 * t.3).sum::<f64>().max(1e-12);
    let free: Vec<usize> = (0..3).filter(|&c| obj.n[c] > 0.0).collect();
    let mut eta = [RATE_FLOOR.ln(); 3];
    for &c in &free {
        eta[c] = ((obj.n[c] + 0.5) / exposure).ln();
    }
    let (mut val, _, _) = obj.eval(&eta);
    let mut converged = free.is_empty();
    let mut iterations = 0;
    let mut trace = vec![TraceRecord {
        iter: 0,
        loglik: val,
        delta: None,
        seconds: start.elapsed().as_secs_f64(),
    }];
    for it in 1..=opts.max_iter {
        if free.is_empty() {
            break;
        }
        let (_, g, hm) = obj.eval(&eta);
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&c| g[c]));
        if gf.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        iterations = it;
        let hf = DMatrix::from_fn(free.len(), free.len(), |i, j| hm[(free[i], free[j])]);
        let dir = (-hf).cholesky().map(|c| c.solve(&gf)).unwrap_or_else(|| gf.clone());
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let mut cand = eta;
            for (i, &c) in free.iter().enumerate() {
                cand[c] += t * dir[i];
            }
            let (cv, _, _) = obj.eval(&cand);
            if cv.is_finite() && cv >= val {
                trace.push(TraceRecord {
                    iter: it,
                    loglik: cv,
                    delta: Some(cv - val),
                    seconds: start.elapsed().as_secs_f64(),
                });
                eta = cand;
                val = cv;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            converged = gf.amax() < opts.grad_tol.sqrt();
            break;
        }
    }
    let (_, _, hm) = obj.eval(&eta);
    let floored: Vec<Rate> = (0..3).filter(|c| !free.contains(c)).map(|c| Rate::ALL[c]).collect();
    let se = if floored.is_empty() {
        Some(se_from_hessian(&hm, &eta))
    } else {
        Some(crate::em::SeReport {
            std_errors: None,
            wald_ci_95: None,
            diagnostics: Some("standard errors unavailable for rates at the floor".into()),
        })
    };
    let mut warnings = Vec::new();
    if counts.dropped > 0 {
        warnings.push(format!(
            "{} of {} intervals dropped as multi-change",
            counts.dropped,
            counts.dropped + counts.usable()
        ));
    }
    let beta = RegressionCoefficients::new(vec![eta[0]], vec![eta[1]], vec![eta[2]])?;
    let rates = RateTriple::new(eta[0].exp(), eta[1].exp(), eta[2].exp())?;
    Ok(assemble_fit(
        data,
        &model,
        FitParts {
            method: FitMethod::Fm,
            beta_hat: beta,
            loglik: fm_loglik(data, &rates),
            trace,
            n_iterations: iterations,
            converged,
            se,
            floored,
            warnings,
            fm_counts: Some(counts),
        },
        opts.n_units,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Offset of each initial simplex vertex along its coordinate.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 2000,
            initial_step: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fval: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best value after each iteration.
    pub history: Vec<f64>,
}

/// Minimize `f` with the standard simplex moves (1, 2, 0.5, 0.5). Non-finite
/// values are treated as `+∞`.
pub fn nelder_mead<F>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let fe = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() { v } else { f64::INFINITY }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), fe(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        let v = fe(&x);
        simplex.push((x, v));
    }
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(ai, bi)| ai + t * (bi - ai)).collect()
    };
    for it in 0..opts.max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (lo, hi) = (simplex[0].1, simplex[n].1);
        if hi - lo <= opts.tol * (lo.abs() + opts.tol) {
            converged = true;
            break;
        }
        iterations = it + 1;
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }
        let worst = simplex[n].0.clone();
        let xr = combine(&centroid, &worst, -1.0);
        let fr = fe(&xr);
        if fr < simplex[0].1 {
            let xe = combine(&centroid, &worst, -2.0);
            let fe_ = fe(&xe);
            simplex[n] = if fe_ < fr { (xe, fe_) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = combine(&centroid, &xr, 0.5);
                let v = fe(&xc);
                (xc, v)
            } else {
                let xc = combine(&centroid, &worst, 0.5);
                let v = fe(&xc);
                (xc, v)
            };
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    let x = combine(&best, &v.0, 0.5);
                    let val = fe(&x);
                    *v = (x, val);
                }
            }
        }
        history.push(simplex.iter().map(|v| v.1).fold(f64::INFINITY, f64::min));
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fval) = simplex.swap_remove(0);
    NelderMeadResult {
        x,
        fval,
        iterations,
        converged,
        history,
    }
}

/// Maximize the observed log-likelihood with Nelder–Mead from `beta0`.
pub fn fit_direct(
    data: &PanelDataset,
    model: &ModelSpec,
    beta0: Option<&RegressionCoefficients>,
    nm: &NelderMeadOptions,
    opts: &FitOptions,
) -> Result<FitResult> {
    let start = Instant::now();
    let beta0 = match beta0 {
        Some(b) => b.clone(),
        None => crate::em::moment_start(data, model),
    };
    let widths = model.widths();
    let f = |x: &[f64]| -> f64 {
        RegressionCoefficients::unflatten(x, widths)
            .and_then(|b| observed_loglik(data, model, &b, opts))
            .map(|v| -v)
            .unwrap_or(f64::INFINITY)
    };
    let res = nelder_mead(f, &beta0.flatten(), nm);
    let beta = RegressionCoefficients::unflatten(&res.x, widths)?;
    let loglik = observed_loglik(data, model, &beta, opts)?;
    let elapsed = start.elapsed().as_secs_f64();
    let n_hist = res.history.len().max(1) as f64;
    let mut prev: Option<f64> = None;
    let trace = res
        .history
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ll = -v;
            let rec = TraceRecord {
                iter: i + 1,
                loglik: ll,
                delta: prev.map(|p| ll - p),
                seconds: elapsed * (i + 1) as f64 / n_hist,
            };
            prev = Some(ll);
            rec
        })
        .collect();
    let se = opts
        .compute_se
        .then(|| crate::em::standard_errors(data, model, &beta, opts));
    Ok(assemble_fit(
        data,
        model,
        FitParts {
            method: FitMethod::Direct,
            beta_hat: beta,
            loglik,
            trace,
            n_iterations: res.iterations,
            converged: res.converged,
            se,
            floored: Vec::new(),
            warnings: Vec::new(),
            fm_counts: None,
        },
        opts.n_units,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::INTERCEPT;

    fn base_rates() -> RateTriple {
        RateTriple::new(0.0188, 0.00268, 0.0147).unwrap()
    }

    fn data(ivs: Vec<ReducedInterval>) -> PanelDataset {
        PanelDataset::from_intervals(vec![INTERCEPT.into()], vec![("p".into(), vec![1.0], ivs)]).unwrap()
    }

    #[test]
    fn no_event_matches_fast_path() {
        let r = base_rates();
        let ll = fm_event_logprob(FmEvent::None, 10, 1.0, &r);
        assert!((ll - (-10.0 * r.theta())).abs() < 1e-15);
        assert!((ll + 0.362).abs() < 1e-3);
    }

    #[test]
    fn shift_logprob() {
        let r = base_rates();
        let ll = fm_event_logprob(FmEvent::Shift, 12, 1.0, &r);
        assert!((ll - ((12.0 * r.nu).ln() - 12.0 * r.theta())).abs() < 1e-14);
    }

    #[test]
    fn single_event_integral() {
        let r = RateTriple::new(0.3, 0.1, 0.2).unwrap();
        let (k, dt) = (4usize, 1.7);
        let steps = 20000;
        let h = dt / steps as f64;
        let theta = r.theta();
        let mut acc = 0.0;
        for i in 0..steps {
            let tau = (i as f64 + 0.5) * h;
            acc += (-(k as f64) * theta * tau).exp() * (-(k as f64 + 1.0) * theta * (dt - tau)).exp() * h;
        }
        let want = (k as f64 * r.lambda * acc).ln();
        let got = fm_event_logprob(FmEvent::Birth, k, dt, &r);
        assert!((got - want).abs() < 1e-7);
    }

    #[test]
    fn psi_series_continuity() {
        for z in [-2e-4f64, -9e-5, 9e-5, 2e-4, -1.1e-3, -9e-4, 9e-4, 1.1e-3, -1.1e-2, -9e-3, 9e-3, 1.1e-2] {
            let direct = (z.exp_m1() / z).ln();
            assert!((psi(z) - direct).abs() < 1e-12);
            let d1 = (psi(z + 1e-6) - psi(z - 1e-6)) / 2e-6;
            assert!((psi1(z) - d1).abs() < 1e-6);
            let d2 = (psi1(z + 1e-5) - psi1(z - 1e-5)) / 2e-5;
            assert!((psi2(z) - d2).abs() < 1e-6);
        }
    }

    #[test]
    fn classification() {
        let iv = |a, b, c| ReducedInterval::new(a, b, c, 1.0).unwrap();
        assert_eq!(classify(&iv(3, 3, 0)), Some(FmEvent::None));
        assert_eq!(classify(&iv(3, 3, 1)), Some(FmEvent::Birth));
        assert_eq!(classify(&iv(3, 2, 1)), Some(FmEvent::Shift));
        assert_eq!(classify(&iv(3, 2, 0)), Some(FmEvent::Death));
        assert_eq!(classify(&iv(3, 1, 0)), None);
        assert_eq!(classify(&iv(3, 3, 2)), None);
    }

    #[test]
    fn all_dropped_is_error() {
        let d = data(vec![ReducedInterval::new(5, 2, 0, 1.0).unwrap()]);
        assert!(matches!(fit_fm(&d, &FmOptions::default()), Err(BdsError::NoUsableData(_))));
    }

    #[test]
    fn single_no_event_floors() {
        let d = data(vec![ReducedInterval::new(5, 5, 0, 1.0).unwrap()]);
        let fit = fit_fm(&d, &FmOptions::default()).unwrap();
        assert_eq!(fit.floored.len(), 3);
        assert!(fit.beta_hat.beta_lambda[0] <= RATE_FLOOR.ln() + 1e-9);
    }

    #[test]
    fn fm_fit_is_stationary() {
        let mut ivs = Vec::new();
        for i in 0..40 {
            let a = 3 + i % 5;
            ivs.push(match i % 4 {
                0 => ReducedInterval::new(a, a, 1, 0.5).unwrap(),
                1 => ReducedInterval::new(a, a - 1, 0, 0.5).unwrap(),
                2 => ReducedInterval::new(a, a - 1, 1, 0.5).unwrap(),
                _ => ReducedInterval::new(a, a, 0, 0.5).unwrap(),
            });
        }
        let d = data(ivs);
        let fit = fit_fm(&d, &FmOptions::default()).unwrap();
        assert!(fit.converged);
        let b = &fit.beta_hat;
        let ll = |l: f64, n: f64, m: f64| fm_loglik(&d, &RateTriple::new(l.exp(), n.exp(), m.exp()).unwrap());
        let (l, n, m) = (b.beta_lambda[0], b.beta_nu[0], b.beta_mu[0]);
        let h = 1e-5;
        for g in [
            (ll(l + h, n, m) - ll(l - h, n, m)) / (2.0 * h),
            (ll(l, n + h, m) - ll(l, n - h, m)) / (2.0 * h),
            (ll(l, n, m + h) - ll(l, n, m - h)) / (2.0 * h),
        ] {
            assert!(g.abs() < 1e-5, "gradient {g}");
        }
        assert!((fit.loglik - ll(l, n, m)).abs() < 1e-12);
        assert!(fit.std_errors.is_some());
    }

    #[test]
    fn nelder_mead_quadratic() {
        let f = |x: &[f64]| (x[0] - 1.25).powi(2) + 3.0;
        let r = nelder_mead(f, &[0.0], &NelderMeadOptions { tol: 1e-14, ..Default::default() });
        assert!((r.x[0] - 1.25).abs() < 1e-6);
        assert!(r.converged);
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = nelder_mead(f, &[-1.2, 1.0], &NelderMeadOptions { tol: 1e-14, initial_step: 0.5, ..Default::default() });
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn nelder_mead_cap_flags_unconverged() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let r = nelder_mead(f, &[5.0, 5.0, 5.0], &NelderMeadOptions { tol: 0.0, max_iter: 5, initial_step: 1.0 });
        assert!(!r.converged);
        assert_eq!(r.iterations, 5);
    }
}
