//! Dormand-Prince 5(4) embedded Runge-Kutta integrator for small systems with
//! real or complex state.

use std::ops::{Add, Mul};

use num_complex::Complex64;

pub trait OdeScalar: Copy + Add<Output = Self> + Mul<f64, Output = Self> + Default {
    fn modulus(self) -> f64;
}

impl OdeScalar for f64 {
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl OdeScalar for Complex64 {
    fn modulus(self) -> f64 {
        self.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeTol {
    pub abs: f64,
    pub rel: f64,
    pub max_steps: usize,
}

impl Default for OdeTol {
    fn default() -> Self {
        Self { abs: 1e-12, rel: 1e-10, max_steps: 1_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OdeFailure {
    StepUnderflow { t: f64, h: f64 },
    TooManySteps { t: f64 },
    NonFinite { t: f64 },
}

impl std::fmt::Display for OdeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OdeFailure::StepUnderflow { t, h } => write!(f, "step size underflow (h={h:e}) at t={t}"),
            OdeFailure::TooManySteps { t } => write!(f, "step budget exhausted at t={t}"),
            OdeFailure::NonFinite { t } => write!(f, "solution became non-finite at t={t}"),
        }
    }
}

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
// Difference between the 5th and embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn comb<T: OdeScalar, const N: usize>(y: &[T; N], h: f64, terms: &[(f64, &[T; N])]) -> [T; N] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] = out[i] + k[i] * (h * c);
        }
    }
    out
}

/// Integrates `y' = f(t, y)` from `t0` to `t1 > t0`.
pub fn dopri5<T: OdeScalar, const N: usize, F>(
    mut f: F,
    t0: f64,
    t1: f64,
    y0: [T; N],
    tol: &OdeTol,
) -> Result<[T; N], OdeFailure>
where
    F: FnMut(f64, &[T; N]) -> [T; N],
{
    if t1 <= t0 {
        return Ok(y0);
    }
    let span = t1 - t0;
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);
    let scale0: f64 = (0..N).map(|i| k1[i].modulus()).fold(0.0, f64::max);
    let mut h = if scale0 > 0.0 { (0.01 / scale0).min(span * 0.1) } else { span * 0.1 };
    h = h.max(span * 1e-6);
    let mut steps = 0;
    while t < t1 {
        if steps >= tol.max_steps {
            return Err(OdeFailure::TooManySteps { t });
        }
        steps += 1;
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        let k2 = f(t + C2 * h, &comb(&y, h, &[(A21, &k1)]));
        let k3 = f(t + C3 * h, &comb(&y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(t + C4 * h, &comb(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = f(t + C5 * h, &comb(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
        let k6 = f(t + h, &comb(&y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]));
        let y5 = comb(&y, h, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let k7 = f(t + h, &y5);
        let mut err: f64 = 0.0;
        for i in 0..N {
            let e = (k1[i] * E1 + k3[i] * E3 + k4[i] * E4 + k5[i] * E5 + k6[i] * E6 + k7[i] * E7) * h;
            let sc = tol.abs + tol.rel * y[i].modulus().max(y5[i].modulus());
            err = err.max(e.modulus() / sc);
        }
        if !err.is_finite() {
            h *= 0.25;
            if h < 1e-14 * t.abs().max(span) {
                return Err(OdeFailure::NonFinite { t });
            }
            continue;
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + h };
            y = y5;
            k1 = k7;
            if (0..N).any(|i| !y[i].modulus().is_finite()) {
                return Err(OdeFailure::NonFinite { t });
            }
        }
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= if err <= 1.0 { fac } else { fac.min(1.0) };
        if h < 1e-14 * t.abs().max(span) {
            return Err(OdeFailure::StepUnderflow { t, h });
        }
    }
    Ok(y)
}
