//! Fourier inversion of generating-function grids.
//!
//! The coefficient of `s₁^l s₂^m` in a function `F` analytic on the closed
//! polydisc is approximated by `(1/N²) Σ_u Σ_v F(ωᵘ, ωᵛ) ω^{−(ul + vm)}` with
//! `ω = exp(2πi/N)`, i.e. a forward 2-D DFT. Mass at counts `≥ N` wraps
//! around, so grids are sized from the largest count involved and the upper
//! half of the recovered coefficients is monitored as an aliasing proxy.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{BdsError, Result};
use crate::genfun::{
    h1_affine_batch, r_derivatives_affine, root_of_unity, AffineDerivative, AffineH1,
    GenFunKind, GenFunOptions, GridSpec,
};
use crate::model::{RateTriple, ReducedInterval};

type C = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralOptions {
    pub genfun: GenFunOptions,
    /// Largest tolerated probability mass in the upper half of the grid.
    pub alias_tol: f64,
    /// Largest tolerated imaginary residue and negative real part.
    pub residue_tol: f64,
    /// Probabilities below this are treated as impossible transitions.
    pub prob_floor: f64,
    pub allow_alias: bool,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            genfun: GenFunOptions::default(),
            alias_tol: 1e-6,
            residue_tol: 1e-8,
            prob_floor: 1e-12,
            allow_alias: false,
        }
    }
}

/// Smallest admissible grid for counts up to `max_count` (at least 32).
pub fn choose_grid_size(max_count: usize) -> usize {
    (2 * max_count + 8).next_power_of_two().max(32)
}

/// In-place forward 2-D DFT of an `n × n` row-major array.
pub fn fft2_forward(values: &mut [C], n: usize) {
    assert_eq!(values.len(), n * n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    for row in values.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![C::new(0.0, 0.0); n];
    for v in 0..n {
        for u in 0..n {
            col[u] = values[u * n + v];
        }
        fft.process(&mut col);
        for u in 0..n {
            values[u * n + v] = col[u];
        }
    }
}

/// Coefficients `c[l * n + m]` recovered from grid values `F(ωᵘ, ωᵛ)`.
pub fn invert_grid(values: &[C], n: usize) -> Vec<C> {
    let mut out = values.to_vec();
    fft2_forward(&mut out, n);
    let scale = 1.0 / (n * n) as f64;
    for z in &mut out {
        *z *= scale;
    }
    out
}

fn to_real(coeffs: Vec<C>, tol: f64) -> Result<(Vec<f64>, f64, f64)> {
    let scale = coeffs.iter().map(|z| z.re.abs()).fold(1.0, f64::max);
    let max_imag = coeffs.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let min_real = coeffs.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    if !(max_imag < tol * scale) || !(min_real > -tol * scale) {
        return Err(BdsError::InversionResidue { max_imag, min_real });
    }
    Ok((coeffs.into_iter().map(|z| z.re.max(0.0)).collect(), max_imag, min_real))
}

fn upper_tail(p: &[f64], n: usize) -> f64 {
    let h = n / 2;
    let mut tail = 0.0;
    for l in 0..n {
        for m in 0..n {
            if l >= h || m >= h {
                tail += p[l * n + m];
            }
        }
    }
    tail
}

/// `p[l * n + m]` ≈ probability of reaching `(l, m)` from the start state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub n: usize,
    pub start: (usize, usize),
    pub t: f64,
    pub rates: RateTriple,
    pub p: Vec<f64>,
    /// Mass in the upper half of the grid.
    pub tail: f64,
    pub max_imag_residue: f64,
}

impl TransitionMatrix {
    pub fn get(&self, l: usize, m: usize) -> f64 {
        if l >= self.n || m >= self.n {
            0.0
        } else {
            self.p[l * self.n + m]
        }
    }

    pub fn sum(&self) -> f64 {
        self.p.iter().sum()
    }
}

/// Restricted moments `E[stat · 1{X(t) = (l, m)}]` for the four statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentMatrices {
    pub n: usize,
    pub start: (usize, usize),
    pub t: f64,
    pub rates: RateTriple,
    pub m_plus: Vec<f64>,
    pub m_shift: Vec<f64>,
    pub m_minus: Vec<f64>,
    pub m_star: Vec<f64>,
}

impl MomentMatrices {
    pub fn matrix(&self, kind: GenFunKind) -> &[f64] {
        match kind {
            GenFunKind::Birth => &self.m_plus,
            GenFunKind::Shift => &self.m_shift,
            GenFunKind::Death => &self.m_minus,
            GenFunKind::ParticleTime => &self.m_star,
            GenFunKind::Probability => panic!("probabilities live in TransitionMatrix"),
        }
    }

    pub fn get(&self, kind: GenFunKind, l: usize, m: usize) -> f64 {
        self.matrix(kind)[l * self.n + m]
    }

    pub fn total(&self, kind: GenFunKind) -> f64 {
        self.matrix(kind).iter().sum()
    }
}

/// Conditional expectations of the sufficient statistics over one interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalExpectations {
    pub prob: f64,
    pub e_birth: f64,
    pub e_shift: f64,
    pub e_death: f64,
    pub e_time: f64,
}

/// Binomial coefficient as a float.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |c, i| c * (n - i) as f64 / (i + 1) as f64)
}

fn check_start(j: usize, k: usize, n: usize) -> Result<()> {
    if 2 * (j + k) >= n {
        return Err(BdsError::Aliasing {
            tail: f64::NAN,
            n,
        });
    }
    Ok(())
}

fn start_powers(phi1: C, phi2: C, j: usize, k: usize) -> (C, C, C) {
    let p1 = phi1.powu(j.saturating_sub(1) as u32);
    let p2 = phi2.powu(k.saturating_sub(1) as u32);
    let full1 = if j == 0 { C::new(1.0, 0.0) } else { p1 * phi1 };
    let full2 = if k == 0 { C::new(1.0, 0.0) } else { p2 * phi2 };
    (full1 * full2, p1 * full2, full1 * p2)
}

/// Transition probabilities from `(a, 0)` over time `t`.
pub fn invert_probabilities(
    a: usize,
    t: f64,
    rates: &RateTriple,
    n: usize,
    opts: &SpectralOptions,
) -> Result<TransitionMatrix> {
    invert_probabilities_from(a, 0, t, rates, n, opts)
}

/// Transition probabilities from a general start `(j, k)`.
pub fn invert_probabilities_from(
    j: usize,
    k: usize,
    t: f64,
    rates: &RateTriple,
    n: usize,
    opts: &SpectralOptions,
) -> Result<TransitionMatrix> {
    let grid = GridSpec::new(n)?;
    check_start(j, k, n)?;
    let phi = h1_affine_batch(&[(GenFunKind::Probability, 1.0)], t, &grid, rates, &opts.genfun)?
        .remove(0);
    let mut values = Vec::with_capacity(n * n);
    for &s1 in grid.points() {
        for v in 0..n {
            values.push(start_powers(phi.eval(s1, v), phi.h2[v], j, k).0);
        }
    }
    let (p, max_imag, _) = to_real(invert_grid(&values, n), opts.residue_tol)?;
    let tail = upper_tail(&p, n);
    if tail > opts.alias_tol && !opts.allow_alias {
        return Err(BdsError::Aliasing { tail, n });
    }
    Ok(TransitionMatrix {
        n,
        start: (j, k),
        t,
        rates: *rates,
        p,
        tail,
        max_imag_residue: max_imag,
    })
}

/// Restricted moment matrices from `(a, 0)`.
pub fn invert_moments(
    a: usize,
    t: f64,
    rates: &RateTriple,
    n: usize,
    opts: &SpectralOptions,
) -> Result<MomentMatrices> {
    if a == 0 {
        return Err(BdsError::InvalidParameter(
            "restricted moments need at least one initial particle".into(),
        ));
    }
    invert_moments_from(a, 0, t, rates, n, opts)
}

/// Restricted moment matrices from a general start `(j, k)`.
pub fn invert_moments_from(
    j: usize,
    k: usize,
    t: f64,
    rates: &RateTriple,
    n: usize,
    opts: &SpectralOptions,
) -> Result<MomentMatrices> {
    let grid = GridSpec::new(n)?;
    check_start(j, k, n)?;
    let phi = h1_affine_batch(&[(GenFunKind::Probability, 1.0)], t, &grid, rates, &opts.genfun)?
        .remove(0);
    let derivs = r_derivatives_affine(&GenFunKind::STATISTICS, t, &grid, rates, &opts.genfun)?;
    let mut grids: Vec<Vec<C>> = vec![Vec::with_capacity(n * n); 4];
    let (jf, kf) = (j as f64, k as f64);
    for &s1 in grid.points() {
        for v in 0..n {
            let (_, d1w, d2w) = start_powers(phi.eval(s1, v), phi.h2[v], j, k);
            for (g, d) in grids.iter_mut().zip(&derivs) {
                let mut val = d1w * d.eval(s1, v) * jf + d2w * d.dh2[v] * kf;
                if d.kind == GenFunKind::ParticleTime {
                    val = -val;
                }
                g.push(val);
            }
        }
    }
    let mut mats = Vec::with_capacity(4);
    for g in grids {
        mats.push(to_real(invert_grid(&g, n), opts.residue_tol)?.0);
    }
    let m_star = mats.pop().expect("four statistics");
    let m_minus = mats.pop().expect("four statistics");
    let m_shift = mats.pop().expect("four statistics");
    let m_plus = mats.pop().expect("four statistics");
    Ok(MomentMatrices {
        n,
        start: (j, k),
        t,
        rates: *rates,
        m_plus,
        m_shift,
        m_minus,
        m_star,
    })
}

/// Generating-function solutions for one `(rates, dt)` pair, reusable for
/// every interval sharing that pair.
#[derive(Debug, Clone)]
pub struct GridBundle {
    pub n: usize,
    pub rates: RateTriple,
    pub dt: f64,
    twiddle: Vec<C>,
    phi: AffineH1,
    derivs: Option<Vec<AffineDerivative>>,
}

impl GridBundle {
    pub fn new(
        rates: &RateTriple,
        dt: f64,
        n: usize,
        with_moments: bool,
        opts: &SpectralOptions,
    ) -> Result<Self> {
        let grid = GridSpec::new(n)?;
        let phi = h1_affine_batch(&[(GenFunKind::Probability, 1.0)], dt, &grid, rates, &opts.genfun)?
            .remove(0);
        let derivs = if with_moments {
            Some(r_derivatives_affine(&GenFunKind::STATISTICS, dt, &grid, rates, &opts.genfun)?)
        } else {
            None
        };
        let twiddle = (0..n).map(|k| root_of_unity(k, n).conj()).collect();
        Ok(Self {
            n,
            rates: *rates,
            dt,
            twiddle,
            phi,
            derivs,
        })
    }

    pub fn has_moments(&self) -> bool {
        self.derivs.is_some()
    }

    /// Upper-half mass of the type-2 count marginal from `(a, 0)`.
    pub fn marginal_tail(&self, a: usize) -> f64 {
        let n = self.n;
        let mut f: Vec<C> = (0..n)
            .map(|v| (self.phi.a[v] + self.phi.b[v]).powu(a as u32))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut f);
        f[n / 2..].iter().map(|z| z.re.max(0.0) / n as f64).sum()
    }

    pub fn check_alias(&self, a: usize, opts: &SpectralOptions) -> Result<()> {
        if 2 * a >= self.n {
            return Err(BdsError::Aliasing {
                tail: f64::NAN,
                n: self.n,
            });
        }
        let tail = self.marginal_tail(a);
        if tail > opts.alias_tol && !opts.allow_alias {
            return Err(BdsError::Aliasing { tail, n: self.n });
        }
        Ok(())
    }

    /// `[p, m⁺, m→, m⁻, m*]` at a single end state from `(a, 0)`; the moment
    /// entries are zero when the bundle was built without moments.
    ///
    /// `(A s₁ + B)^a` is expanded binomially in `s₁`, so only the `s₂`
    /// direction needs a discrete Fourier sum.
    pub fn coefficients(&self, a: usize, l: usize, m: usize) -> [C; 5] {
        let n = self.n;
        let mut acc = [C::new(0.0, 0.0); 5];
        if l > a {
            return acc;
        }
        let c_al = binomial(a, l);
        // a·C(a−1, l−1) and a·C(a−1, l), the weights of dA and dB.
        let w_da = if l >= 1 { a as f64 * binomial(a - 1, l - 1) } else { 0.0 };
        let w_db = if l < a { a as f64 * binomial(a - 1, l) } else { 0.0 };
        for v in 0..n {
            let w = self.twiddle[(v * m) % n];
            let (av, bv) = (self.phi.a[v], self.phi.b[v]);
            let al = av.powu(l as u32);
            let bk = bv.powu((a - l) as u32);
            acc[0] += al * bk * w * c_al;
            if let Some(ds) = &self.derivs {
                // A^{l−1} B^{a−l} and A^l B^{a−l−1}
                let t_da = if l >= 1 { av.powu(l as u32 - 1) * bk * w_da } else { C::new(0.0, 0.0) };
                let t_db = if l < a { al * bv.powu((a - l - 1) as u32) * w_db } else { C::new(0.0, 0.0) };
                for (slot, d) in acc[1..].iter_mut().zip(ds) {
                    *slot += (t_da * d.da[v] + t_db * d.db[v]) * w;
                }
            }
        }
        let scale = 1.0 / n as f64;
        for z in &mut acc {
            *z *= scale;
        }
        acc[4] = -acc[4];
        acc
    }

    /// Probability and conditional expectations for `(a, 0) → (b, c_new)`.
    pub fn expectations(
        &self,
        iv: &ReducedInterval,
        opts: &SpectralOptions,
    ) -> Result<IntervalExpectations> {
        let c = self.coefficients(iv.a, iv.b, iv.c_new);
        let tol = opts.residue_tol;
        let p = c[0];
        if !(p.im.abs() < tol) || !(p.re > -tol) {
            return Err(BdsError::InversionResidue {
                max_imag: p.im.abs(),
                min_real: p.re,
            });
        }
        let prob = p.re;
        if !(prob >= opts.prob_floor) {
            return Err(BdsError::ImpossibleTransition {
                context: format!("({}, 0) -> ({}, {}) over dt={}", iv.a, iv.b, iv.c_new, iv.dt),
                prob,
            });
        }
        let mut e = [0.0; 4];
        if self.has_moments() {
            for (slot, z) in e.iter_mut().zip(&c[1..]) {
                let scale = z.re.abs().max(1.0);
                if !(z.im.abs() < tol * scale) || !(z.re > -tol * scale) {
                    return Err(BdsError::InversionResidue {
                        max_imag: z.im.abs(),
                        min_real: z.re,
                    });
                }
                *slot = z.re.max(0.0) / prob;
            }
        }
        Ok(IntervalExpectations {
            prob,
            e_birth: e[0],
            e_shift: e[1],
            e_death: e[2],
            e_time: e[3],
        })
    }
}

/// Single-interval conditional expectations, building a fresh bundle.
pub fn interval_expectations(
    iv: &ReducedInterval,
    rates: &RateTriple,
    n: usize,
    opts: &SpectralOptions,
) -> Result<IntervalExpectations> {
    if iv.a == 0 {
        if iv.b == 0 && iv.c_new == 0 {
            return Ok(IntervalExpectations {
                prob: 1.0,
                ..Default::default()
            });
        }
        return Err(BdsError::ImpossibleTransition {
            context: format!("(0, 0) -> ({}, {})", iv.b, iv.c_new),
            prob: 0.0,
        });
    }
    if 2 * iv.max_count() >= n {
        return Err(BdsError::Aliasing {
            tail: f64::NAN,
            n,
        });
    }
    let bundle = GridBundle::new(rates, iv.dt, n, true, opts)?;
    bundle.check_alias(iv.a, opts)?;
    bundle.expectations(iv, opts)
}
