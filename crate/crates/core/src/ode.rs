//! Adaptive Dormand–Prince 5(4) integration of complex-valued systems.

use num_complex::Complex64;

/// Right-hand side of `dy/dt = f(t, y)` over complex vectors.
pub trait ComplexSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[Complex64], dy: &mut [Complex64]);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen automatically when `None`.
    pub h_init: Option<f64>,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            h_init: None,
            h_min: 1e-14,
            max_steps: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeFailure {
    pub t: f64,
    /// Component with the largest scaled error at the failing step.
    pub component: usize,
    pub reason: String,
}

// Dormand–Prince tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Differences between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrate `sys` from `t0` to `t1` in place. The error norm is the maximum
/// over components, so every component meets the tolerance individually.
pub fn integrate<S: ComplexSystem + ?Sized>(
    sys: &S,
    t0: f64,
    t1: f64,
    y: &mut [Complex64],
    opts: &OdeOptions,
) -> Result<OdeStats, OdeFailure> {
    let n = sys.dim();
    assert_eq!(y.len(), n, "state length must match system dimension");
    let mut stats = OdeStats::default();
    if t1 == t0 || n == 0 {
        return Ok(stats);
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let zero = Complex64::new(0.0, 0.0);
    let mut k1 = vec![zero; n];
    let mut k2 = vec![zero; n];
    let mut k3 = vec![zero; n];
    let mut k4 = vec![zero; n];
    let mut k5 = vec![zero; n];
    let mut k6 = vec![zero; n];
    let mut k7 = vec![zero; n];
    let mut tmp = vec![zero; n];
    let mut y_new = vec![zero; n];

    let mut t = t0;
    sys.rhs(t, y, &mut k1);
    stats.rhs_evals += 1;

    let mut h = match opts.h_init {
        Some(h) => h.abs().min(span),
        None => initial_step(sys, t, y, &k1, dir, opts, &mut stats),
    };
    let mut last_reject = false;

    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= span * 1e-15 {
            break;
        }
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(OdeFailure {
                t,
                component: 0,
                reason: format!("step budget of {} exhausted", opts.max_steps),
            });
        }
        let mut final_step = false;
        if h >= remaining {
            h = remaining;
            final_step = true;
        }
        let hs = h * dir;

        for i in 0..n {
            tmp[i] = y[i] + k1[i] * (hs * A21);
        }
        sys.rhs(t + C2 * hs, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + (k1[i] * A31 + k2[i] * A32) * hs;
        }
        sys.rhs(t + C3 * hs, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + (k1[i] * A41 + k2[i] * A42 + k3[i] * A43) * hs;
        }
        sys.rhs(t + C4 * hs, &tmp, &mut k4);
        for i in 0..n {
            tmp[i] = y[i] + (k1[i] * A51 + k2[i] * A52 + k3[i] * A53 + k4[i] * A54) * hs;
        }
        sys.rhs(t + C5 * hs, &tmp, &mut k5);
        for i in 0..n {
            tmp[i] = y[i]
                + (k1[i] * A61 + k2[i] * A62 + k3[i] * A63 + k4[i] * A64 + k5[i] * A65) * hs;
        }
        let t_next = if final_step { t1 } else { t + hs };
        sys.rhs(t_next, &tmp, &mut k6);
        for i in 0..n {
            y_new[i] = y[i]
                + (k1[i] * B1 + k3[i] * B3 + k4[i] * B4 + k5[i] * B5 + k6[i] * B6) * hs;
        }
        sys.rhs(t_next, &y_new, &mut k7);
        stats.rhs_evals += 6;

        let mut err = 0.0f64;
        let mut worst = 0;
        for i in 0..n {
            let e = (k1[i] * E1 + k3[i] * E3 + k4[i] * E4 + k5[i] * E5 + k6[i] * E6 + k7[i] * E7)
                * hs;
            let sc = opts.atol + opts.rtol * y[i].norm().max(y_new[i].norm());
            let r = e.norm() / sc;
            if !r.is_finite() {
                return Err(OdeFailure {
                    t,
                    component: i,
                    reason: "non-finite derivative".into(),
                });
            }
            if r > err {
                err = r;
                worst = i;
            }
        }

        if err <= 1.0 {
            stats.accepted += 1;
            t = t_next;
            y.copy_from_slice(&y_new);
            std::mem::swap(&mut k1, &mut k7);
            let mut fac = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
            fac = fac.clamp(0.2, 5.0);
            if last_reject {
                fac = fac.min(1.0);
            }
            last_reject = false;
            h *= fac;
            if final_step {
                break;
            }
        } else {
            stats.rejected += 1;
            last_reject = true;
            h *= (0.9 * err.powf(-0.2)).max(0.2);
            if h < opts.h_min {
                return Err(OdeFailure {
                    t,
                    component: worst,
                    reason: format!("step size {h:.3e} fell below minimum {:.3e}", opts.h_min),
                });
            }
        }
    }
    Ok(stats)
}

fn initial_step<S: ComplexSystem + ?Sized>(
    sys: &S,
    t: f64,
    y: &[Complex64],
    f0: &[Complex64],
    dir: f64,
    opts: &OdeOptions,
    stats: &mut OdeStats,
) -> f64 {
    let n = y.len();
    let scale: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.norm()).collect();
    let rms = |v: &[Complex64]| -> f64 {
        (v.iter().zip(&scale).map(|(x, s)| (x.norm() / s).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let d0 = rms(y);
    let d1 = rms(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<Complex64> = y.iter().zip(f0).map(|(a, b)| a + b * (h0 * dir)).collect();
    let mut f1 = vec![Complex64::new(0.0, 0.0); n];
    sys.rhs(t + h0 * dir, &y1, &mut f1);
    stats.rhs_evals += 1;
    let diff: Vec<Complex64> = f1.iter().zip(f0).map(|(a, b)| (a - b) / h0).collect();
    let d2 = rms(&diff);
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear(Complex64);
    impl ComplexSystem for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, y: &[Complex64], dy: &mut [Complex64]) {
            dy[0] = self.0 * y[0];
        }
    }

    #[test]
    fn exponential_growth_and_rotation() {
        for k in [Complex64::new(-1.3, 0.0), Complex64::new(0.2, 2.0)] {
            let mut y = [Complex64::new(1.0, 0.5)];
            integrate(&Linear(k), 0.0, 3.0, &mut y, &OdeOptions::default()).unwrap();
            let exact = Complex64::new(1.0, 0.5) * (k * 3.0).exp();
            assert!((y[0] - exact).norm() < 1e-7 * exact.norm(), "{k}: {} vs {}", y[0], exact);
        }
    }

    #[test]
    fn backwards_in_time() {
        let mut y = [Complex64::new(2.0, 0.0)];
        integrate(&Linear(Complex64::new(0.5, 0.0)), 2.0, 0.0, &mut y, &OdeOptions::default())
            .unwrap();
        assert!((y[0].re - 2.0 * (-1.0f64).exp()).abs() < 1e-8);
    }

    struct Logistic;
    impl ComplexSystem for Logistic {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, t: f64, y: &[Complex64], dy: &mut [Complex64]) {
            dy[0] = y[0] * (1.0 - y[0]);
            dy[1] = Complex64::new(t.cos(), 0.0);
        }
    }

    #[test]
    fn nonlinear_system() {
        let mut y = [Complex64::new(0.1, 0.0), Complex64::new(0.0, 0.0)];
        let opts = OdeOptions {
            rtol: 1e-10,
            atol: 1e-12,
            ..Default::default()
        };
        integrate(&Logistic, 0.0, 5.0, &mut y, &opts).unwrap();
        let e5 = 5.0f64.exp();
        let exact = 0.1 * e5 / (1.0 - 0.1 + 0.1 * e5);
        assert!((y[0].re - exact).abs() < 1e-9);
        assert!((y[1].re - 5.0f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn zero_span_is_noop() {
        let mut y = [Complex64::new(1.0, 2.0)];
        let stats =
            integrate(&Linear(Complex64::new(1.0, 0.0)), 1.0, 1.0, &mut y, &OdeOptions::default())
                .unwrap();
        assert_eq!(stats.accepted, 0);
        assert_eq!(y[0], Complex64::new(1.0, 2.0));
    }

    struct Blowup;
    impl ComplexSystem for Blowup {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, y: &[Complex64], dy: &mut [Complex64]) {
            dy[0] = y[0] * y[0];
        }
    }

    #[test]
    fn finite_time_blowup_fails() {
        let mut y = [Complex64::new(1.0, 0.0)];
        assert!(integrate(&Blowup, 0.0, 2.0, &mut y, &OdeOptions::default()).is_err());
    }
}
