//! Generating functions of the two-type branching approximation.
//!
//! Type-1 particles are the sites occupied at the start of an interval and
//! type-2 particles are everything created since. `φ₁`/`φ₂` are the
//! probability generating functions of the end state started from a single
//! particle of each type; the pseudo-generating functions `H` attach a
//! counting variable `r` to births, shifts, deaths or particle time.
//!
//! Every `H₂` obeys a scalar Riccati equation `y' = αy² − κy + γ`, `y(0)=s₂`,
//! with a closed-form solution. `H₁` obeys an ODE that is linear in `H₁`, so
//! `H₁(s₁, s₂) = A(s₂)·s₁ + B(s₂)`: only one pair `(A, B)` per `s₂` grid
//! point is needed, either integrated numerically or taken in closed form.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{BdsError, Result};
use crate::model::RateTriple;
use crate::ode::{integrate, ComplexSystem, OdeOptions};

type C = Complex64;

const ONE: C = C::new(1.0, 0.0);
const ZERO: C = C::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GenFunKind {
    Probability,
    Birth,
    Shift,
    Death,
    ParticleTime,
}

impl GenFunKind {
    pub const STATISTICS: [GenFunKind; 4] = [
        GenFunKind::Birth,
        GenFunKind::Shift,
        GenFunKind::Death,
        GenFunKind::ParticleTime,
    ];

    /// Value of `r` at which counting is switched off.
    pub fn anchor(self) -> f64 {
        match self {
            GenFunKind::ParticleTime => 0.0,
            _ => 1.0,
        }
    }
}

/// Which particles contribute to the shift count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftScope {
    /// Shifts of every particle, matching the complete-data likelihood in
    /// which every particle is exposed to the shift rate.
    #[default]
    AllParticles,
    /// Shifts of type-1 particles only; `H₂` then equals `φ₂`.
    OriginalOnly,
}

/// How `H₁` is evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum H1Method {
    /// Adaptive Runge–Kutta integration of the `H₁` equation.
    #[default]
    Ode,
    /// Exact closed form; falls back to integration where none exists.
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenFunOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Central-difference step for r-derivatives.
    pub r_step: f64,
    pub shift_scope: ShiftScope,
    pub method: H1Method,
}

impl Default for GenFunOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            r_step: 1e-5,
            shift_scope: ShiftScope::AllParticles,
            method: H1Method::Ode,
        }
    }
}

impl GenFunOptions {
    fn ode(&self) -> OdeOptions {
        OdeOptions {
            rtol: self.rtol,
            atol: self.atol,
            ..OdeOptions::default()
        }
    }
}

/// An `N × N` grid of roots of unity, `s = exp(2πi u/N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    n: usize,
    points: Vec<C>,
}

impl GridSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(BdsError::InvalidParameter(format!(
                "grid size must be a power of two and at least 8, got {n}"
            )));
        }
        let points = (0..n).map(|u| root_of_unity(u, n)).collect();
        Ok(Self { n, points })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn points(&self) -> &[C] {
        &self.points
    }
}

/// `exp(2πi k/n)`, exact at the quarter points.
pub fn root_of_unity(k: usize, n: usize) -> C {
    let k = k % n;
    if 4 * k % n == 0 {
        return match 4 * k / n {
            0 => C::new(1.0, 0.0),
            1 => C::new(0.0, 1.0),
            2 => C::new(-1.0, 0.0),
            _ => C::new(0.0, -1.0),
        };
    }
    C::from_polar(1.0, 2.0 * PI * k as f64 / n as f64)
}

/// Values on the `(s₁, s₂)` torus, indexed `[u * N + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    pub n: usize,
    pub values: Vec<C>,
    pub kind: GenFunKind,
    pub r: f64,
    pub t: f64,
    pub rates: RateTriple,
}

impl ComplexGrid {
    pub fn get(&self, u: usize, v: usize) -> C {
        self.values[u * self.n + v]
    }
}

/// `(e^z − 1)/z`, accurate near zero.
pub fn expm1_over_z(z: C) -> C {
    if z.norm() < 1e-2 {
        ONE + z
            * (1.0 / 2.0
                + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z * (1.0 / 720.0 + z / 5040.0)))))
    } else {
        (z.exp() - 1.0) / z
    }
}

/// The scalar Riccati equation `y' = αy² − κy + γ` with real coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Riccati {
    pub alpha: f64,
    pub kappa: f64,
    pub gamma: f64,
}

/// Closed-form solution together with `ln` of the Bernoulli denominator,
/// which also yields `exp(α∫(y − y₀))`.
#[derive(Debug, Clone, Copy)]
struct RiccatiState {
    y: C,
    y0: C,
    log_den: C,
}

impl Riccati {
    pub fn for_kind(kind: GenFunKind, r: f64, rates: &RateTriple, scope: ShiftScope) -> Self {
        let RateTriple { lambda: l, nu, mu } = *rates;
        let (alpha, kappa, gamma) = match kind {
            GenFunKind::Probability => (l, l + mu, mu),
            GenFunKind::Birth => (l * r, l + mu, mu),
            GenFunKind::Death => (l, l + mu, mu * r),
            GenFunKind::ParticleTime => (l, l + mu + r, mu),
            GenFunKind::Shift => match scope {
                ShiftScope::AllParticles => (l, l + mu + nu * (1.0 - r), mu),
                ShiftScope::OriginalOnly => (l, l + mu, mu),
            },
        };
        Self {
            alpha,
            kappa,
            gamma,
        }
    }

    pub fn rhs(&self, y: C) -> C {
        y * y * self.alpha - y * self.kappa + self.gamma
    }

    pub fn solve(&self, s: C, t: f64) -> C {
        self.state(s, t).y
    }

    fn state(&self, s: C, t: f64) -> RiccatiState {
        if t == 0.0 {
            return RiccatiState {
                y: s,
                y0: ZERO,
                log_den: ZERO,
            };
        }
        let Riccati {
            alpha,
            kappa,
            gamma,
        } = *self;
        if alpha == 0.0 {
            let y = s * (-kappa * t).exp() + expm1_over_z(C::new(-kappa * t, 0.0)) * (gamma * t);
            return RiccatiState {
                y,
                y0: ZERO,
                log_den: ZERO,
            };
        }
        let disc = kappa * kappa - 4.0 * alpha * gamma;
        let root = if disc >= 0.0 {
            C::new(disc.sqrt() * if kappa < 0.0 { -1.0 } else { 1.0 }, 0.0)
        } else {
            C::new(0.0, (-disc).sqrt())
        };
        let q = (root + kappa) * 0.5;
        let y0 = if q.norm() == 0.0 { ZERO } else { gamma / q };
        let d = -root;
        let w0 = s - y0;
        let dt = d * t;
        let (y, log_den) = if dt.re <= 0.0 {
            let den = ONE - w0 * expm1_over_z(dt) * (alpha * t);
            (y0 + w0 * dt.exp() / den, den.ln())
        } else {
            // Scaled by e^{-Dt} to stay finite for growing modes.
            let decay = (-dt).exp();
            let den = decay - w0 * expm1_over_z(-dt) * (alpha * t);
            (y0 + w0 / den, dt + den.ln())
        };
        RiccatiState { y, y0, log_den }
    }
}

/// Coefficients of `H₁' = α₁H₁H₂ + β₁H₂ + γ₁ − κ₁H₁`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct H1Coefficients {
    pub alpha1: f64,
    pub beta1: f64,
    pub gamma1: f64,
    pub kappa1: f64,
}

impl H1Coefficients {
    pub fn for_kind(kind: GenFunKind, r: f64, rates: &RateTriple) -> Self {
        let RateTriple { lambda: l, nu, mu } = *rates;
        let theta = rates.theta();
        let (alpha1, beta1, gamma1, kappa1) = match kind {
            GenFunKind::Probability => (l, nu, mu, theta),
            GenFunKind::Birth => (l * r, nu, mu, theta),
            GenFunKind::Death => (l, nu, mu * r, theta),
            GenFunKind::Shift => (l, nu * r, mu, theta),
            GenFunKind::ParticleTime => (l, nu, mu, theta + r),
        };
        Self {
            alpha1,
            beta1,
            gamma1,
            kappa1,
        }
    }
}

/// `φ₂(t, s₂)`: one type-2 particle behaves as a linear birth-death process.
pub fn phi2_closed(t: f64, s2: C, rates: &RateTriple) -> C {
    Riccati::for_kind(GenFunKind::Probability, 1.0, rates, ShiftScope::AllParticles).solve(s2, t)
}

/// Closed-form `H₂` for any kind. `Probability` returns `φ₂`.
pub fn h2_closed(
    kind: GenFunKind,
    r: f64,
    t: f64,
    s2: C,
    rates: &RateTriple,
    scope: ShiftScope,
) -> C {
    Riccati::for_kind(kind, r, rates, scope).solve(s2, t)
}

/// `H₁` in affine form along the `s₂` grid: `H₁(s₁, s₂[v]) = a[v]·s₁ + b[v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineH1 {
    pub kind: GenFunKind,
    pub r: f64,
    pub t: f64,
    pub a: Vec<C>,
    pub b: Vec<C>,
    /// `H₂` at the same `s₂` points.
    pub h2: Vec<C>,
}

impl AffineH1 {
    pub fn eval(&self, s1: C, v: usize) -> C {
        self.a[v] * s1 + self.b[v]
    }

    pub fn to_grid(&self, grid: &GridSpec, rates: &RateTriple) -> ComplexGrid {
        let n = grid.n();
        let mut values = Vec::with_capacity(n * n);
        for &s1 in grid.points() {
            for v in 0..n {
                values.push(self.eval(s1, v));
            }
        }
        ComplexGrid {
            n,
            values,
            kind: self.kind,
            r: self.r,
            t: self.t,
            rates: *rates,
        }
    }
}

fn check_inputs(t: f64, rates: &RateTriple) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(BdsError::InvalidParameter(format!(
            "time must be finite and non-negative, got {t}"
        )));
    }
    RateTriple::new(rates.lambda, rates.nu, rates.mu)?;
    Ok(())
}

fn has_closed_form(kind: GenFunKind, scope: ShiftScope) -> bool {
    !(kind == GenFunKind::Shift && scope == ShiftScope::OriginalOnly)
}

struct H1System<'a> {
    s2: &'a [C],
    parts: Vec<(Riccati, H1Coefficients)>,
}

impl ComplexSystem for H1System<'_> {
    fn dim(&self) -> usize {
        2 * self.s2.len() * self.parts.len()
    }

    fn rhs(&self, t: f64, y: &[C], dy: &mut [C]) {
        let n = self.s2.len();
        for (p, (ric, co)) in self.parts.iter().enumerate() {
            for (v, &s2) in self.s2.iter().enumerate() {
                let i = 2 * (p * n + v);
                let h2 = ric.solve(s2, t);
                let g = h2 * co.alpha1 - co.kappa1;
                dy[i] = g * y[i];
                dy[i + 1] = g * y[i + 1] + h2 * co.beta1 + co.gamma1;
            }
        }
    }
}

/// Solve `H₁` for several `(kind, r)` pairs, integrating them as one system
/// so that neighbouring `r` values share a step sequence.
pub fn h1_affine_batch(
    specs: &[(GenFunKind, f64)],
    t: f64,
    grid: &GridSpec,
    rates: &RateTriple,
    opts: &GenFunOptions,
) -> Result<Vec<AffineH1>> {
    check_inputs(t, rates)?;
    let n = grid.n();
    let s2 = grid.points();
    let ricc: Vec<Riccati> = specs
        .iter()
        .map(|&(k, r)| Riccati::for_kind(k, r, rates, opts.shift_scope))
        .collect();
    let mut out: Vec<AffineH1> = specs
        .iter()
        .zip(&ricc)
        .map(|(&(kind, r), ric)| AffineH1 {
            kind,
            r,
            t,
            a: vec![ONE; n],
            b: vec![ZERO; n],
            h2: s2.iter().map(|&s| ric.solve(s, t)).collect(),
        })
        .collect();
    if t == 0.0 {
        return Ok(out);
    }

    let mut numeric = Vec::new();
    for (i, &(kind, r)) in specs.iter().enumerate() {
        let co = H1Coefficients::for_kind(kind, r, rates);
        if opts.method == H1Method::ClosedForm && has_closed_form(kind, opts.shift_scope) {
            let ric = ricc[i];
            let h = &mut out[i];
            for v in 0..n {
                let st = ric.state(s2[v], t);
                let a = ((st.y0 * co.alpha1 - co.kappa1) * t - st.log_den).exp();
                h.a[v] = a;
                h.b[v] = st.y - a * s2[v];
                h.h2[v] = st.y;
            }
        } else {
            numeric.push((i, ricc[i], co));
        }
    }
    if numeric.is_empty() {
        return Ok(out);
    }

    let sys = H1System {
        s2,
        parts: numeric.iter().map(|&(_, r, c)| (r, c)).collect(),
    };
    let mut y = vec![ZERO; sys.dim()];
    for k in (0..y.len()).step_by(2) {
        y[k] = ONE;
    }
    integrate(&sys, 0.0, t, &mut y, &opts.ode()).map_err(|f| BdsError::Integration {
        point: (f.component / 2) % n,
        t: f.t,
        reason: f.reason,
    })?;
    for (p, &(i, _, _)) in numeric.iter().enumerate() {
        for v in 0..n {
            let k = 2 * (p * n + v);
            out[i].a[v] = y[k];
            out[i].b[v] = y[k + 1];
        }
    }
    Ok(out)
}

/// `H₁` (or `φ₁` for `Probability`) at every point of the grid.
pub fn h1_solve(
    kind: GenFunKind,
    r: f64,
    t: f64,
    grid: &GridSpec,
    rates: &RateTriple,
    opts: &GenFunOptions,
) -> Result<ComplexGrid> {
    let affine = h1_affine_batch(&[(kind, r)], t, grid, rates, opts)?;
    Ok(affine[0].to_grid(grid, rates))
}

/// r-derivatives of `H₁` (affine along `s₂`) and of `H₂` at the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDerivative {
    pub kind: GenFunKind,
    pub da: Vec<C>,
    pub db: Vec<C>,
    pub dh2: Vec<C>,
}

impl AffineDerivative {
    pub fn eval(&self, s1: C, v: usize) -> C {
        self.da[v] * s1 + self.db[v]
    }
}

/// Central-difference r-derivatives for several statistics at once.
pub fn r_derivatives_affine(
    kinds: &[GenFunKind],
    t: f64,
    grid: &GridSpec,
    rates: &RateTriple,
    opts: &GenFunOptions,
) -> Result<Vec<AffineDerivative>> {
    if let Some(k) = kinds.iter().find(|k| **k == GenFunKind::Probability) {
        return Err(BdsError::InvalidParameter(format!(
            "r-derivative requested for {k:?}, which has no counting variable"
        )));
    }
    let h = opts.r_step;
    let specs: Vec<(GenFunKind, f64)> = kinds
        .iter()
        .flat_map(|&k| [(k, k.anchor() + h), (k, k.anchor() - h)])
        .collect();
    let solved = h1_affine_batch(&specs, t, grid, rates, opts)?;
    let diff = |p: &[C], m: &[C]| -> Vec<C> {
        p.iter().zip(m).map(|(x, y)| (x - y) / (2.0 * h)).collect()
    };
    Ok(kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let (p, m) = (&solved[2 * i], &solved[2 * i + 1]);
            AffineDerivative {
                kind,
                da: diff(&p.a, &m.a),
                db: diff(&p.b, &m.b),
                dh2: diff(&p.h2, &m.h2),
            }
        })
        .collect())
}

/// `dH₁/dr` over the full grid plus `dH₂/dr` along `s₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct RDerivative {
    pub dh1: ComplexGrid,
    pub dh2: Vec<C>,
}

pub fn g1_r_derivative(
    kind: GenFunKind,
    t: f64,
    grid: &GridSpec,
    rates: &RateTriple,
    opts: &GenFunOptions,
) -> Result<RDerivative> {
    let d = r_derivatives_affine(&[kind], t, grid, rates, opts)?.remove(0);
    let n = grid.n();
    let mut values = Vec::with_capacity(n * n);
    for &s1 in grid.points() {
        for v in 0..n {
            values.push(d.eval(s1, v));
        }
    }
    Ok(RDerivative {
        dh1: ComplexGrid {
            n,
            values,
            kind,
            r: kind.anchor(),
            t,
            rates: *rates,
        },
        dh2: d.dh2,
    })
}
