//! Laplace transforms `Phi_T(lambda) = E[exp(-lambda * Gamma_T)]` of the
//! terminal clock and the conditional transforms `Phi_{t,T}(lambda; y)`.
//!
//! Riccati systems are written in time-to-maturity `tau`. For a CIR factor
//! `dv = kappa (theta - v) dt + xi sqrt(v) dW`,
//!
//! ```text
//! dB/dtau = lambda - kappa B - xi^2 B^2 / 2,   dA/dtau = kappa theta B,
//! ```
//!
//! and for a squared OU factor `dY = -alpha Y dt + sigma dW`, `v = Y^2`,
//!
//! ```text
//! dB/dtau = lambda - 2 alpha B - 2 sigma^2 B^2,   dA/dtau = sigma^2 B.
//! ```

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::expm::expm;
use crate::numerics::ode::{dopri5, OdeTol};
use crate::numerics::quad;

/// Below this log-value the transform is reported as exactly zero.
pub const LOG_UNDERFLOW: f64 = -700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CirClock {
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    pub v0: f64,
}

/// CIR factor with piecewise-constant coefficients. Segment `i` applies on
/// `[breakpoints[i-1], breakpoints[i])` with `breakpoints[-1] = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeDepCirClock {
    pub breakpoints: Vec<f64>,
    pub kappa: Vec<f64>,
    pub theta: Vec<f64>,
    pub xi: Vec<f64>,
    pub v0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquaredOuClock {
    pub alpha: f64,
    pub sigma: f64,
    pub y0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSwitchingClock {
    /// Row-major rate matrix.
    pub generator: Vec<Vec<f64>>,
    pub levels: Vec<f64>,
    pub initial_dist: Vec<f64>,
}

/// `v = w v_fast + (1 - w) v_slow` with independent CIR factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoFactorCirClock {
    pub weight: f64,
    pub fast: CirClock,
    pub slow: CirClock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ClockSpec {
    Cir(CirClock),
    #[serde(alias = "tdcir")]
    TimeDepCir(TimeDepCirClock),
    #[serde(alias = "sqou")]
    SquaredOu(SquaredOuClock),
    #[serde(alias = "markov")]
    MarkovSwitching(MarkovSwitchingClock),
    #[serde(alias = "cir2")]
    TwoFactorCir(TwoFactorCirClock),
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("{name} must be positive and finite, got {x}")))
    }
}

impl CirClock {
    pub fn new(kappa: f64, theta: f64, xi: f64, v0: f64) -> Self {
        Self { kappa, theta, xi, v0 }
    }

    pub fn validate(&self) -> Result<()> {
        positive("kappa", self.kappa)?;
        positive("theta", self.theta)?;
        positive("xi", self.xi)?;
        positive("v0", self.v0)
    }

    pub fn feller(&self) -> bool {
        2.0 * self.kappa * self.theta > self.xi * self.xi
    }

    pub fn mean_variance(&self, s: f64) -> f64 {
        self.theta + (self.v0 - self.theta) * (-self.kappa * s).exp()
    }

    pub fn expected_clock(&self, t: f64) -> f64 {
        self.theta * t + (self.v0 - self.theta) * (-(-self.kappa * t).exp_m1()) / self.kappa
    }
}

impl SquaredOuClock {
    pub fn validate(&self) -> Result<()> {
        positive("alpha", self.alpha)?;
        positive("sigma", self.sigma)?;
        if !self.y0.is_finite() {
            return Err(Error::InvalidSpec("y0 must be finite".into()));
        }
        Ok(())
    }

    pub fn mean_variance(&self, s: f64) -> f64 {
        let e = (-2.0 * self.alpha * s).exp();
        self.y0 * self.y0 * e + self.sigma * self.sigma * (1.0 - e) / (2.0 * self.alpha)
    }

    pub fn expected_clock(&self, t: f64) -> f64 {
        let a2 = 2.0 * self.alpha;
        let frac = -(-a2 * t).exp_m1() / a2;
        let stat = self.sigma * self.sigma / a2;
        stat * t + (self.y0 * self.y0 - stat) * frac
    }
}

impl TimeDepCirClock {
    pub fn validate(&self) -> Result<()> {
        let m = self.breakpoints.len();
        if m == 0 || self.kappa.len() != m || self.theta.len() != m || self.xi.len() != m {
            return Err(Error::Dimension(format!(
                "time-dependent CIR needs equal-length breakpoints/kappa/theta/xi, got {}/{}/{}/{}",
                m,
                self.kappa.len(),
                self.theta.len(),
                self.xi.len()
            )));
        }
        let mut prev = 0.0;
        for &b in &self.breakpoints {
            if !(b > prev) {
                return Err(Error::InvalidSpec("breakpoints must be strictly increasing and positive".into()));
            }
            prev = b;
        }
        for i in 0..m {
            positive("kappa", self.kappa[i])?;
            positive("theta", self.theta[i])?;
            positive("xi", self.xi[i])?;
        }
        positive("v0", self.v0)
    }

    /// Segment index active at calendar time `s` (the last segment extends
    /// beyond the final breakpoint only for evaluation at `s = end`).
    fn segment(&self, s: f64) -> usize {
        self.breakpoints.iter().position(|&b| s < b).unwrap_or(self.breakpoints.len() - 1)
    }

    pub fn coefficients(&self, s: f64) -> (f64, f64, f64) {
        let i = self.segment(s);
        (self.kappa[i], self.theta[i], self.xi[i])
    }

    fn covers(&self, t: f64) -> Result<()> {
        let end = *self.breakpoints.last().unwrap();
        if t > end * (1.0 + 1e-12) {
            return Err(Error::Domain(format!("breakpoints end at {end} but horizon is {t}")));
        }
        Ok(())
    }

    pub fn mean_variance(&self, s: f64) -> f64 {
        let mut m = self.v0;
        let mut start = 0.0;
        for i in 0..self.breakpoints.len() {
            let end = self.breakpoints[i].min(s);
            if end > start {
                m = self.theta[i] + (m - self.theta[i]) * (-self.kappa[i] * (end - start)).exp();
            }
            start = self.breakpoints[i];
            if start >= s {
                break;
            }
        }
        m
    }

    pub fn expected_clock(&self, t: f64) -> f64 {
        let mut m = self.v0;
        let mut start = 0.0;
        let mut acc = 0.0;
        for i in 0..self.breakpoints.len() {
            let end = self.breakpoints[i].min(t);
            if end > start {
                let d = end - start;
                let (k, th) = (self.kappa[i], self.theta[i]);
                acc += th * d + (m - th) * (-(-k * d).exp_m1()) / k;
                m = th + (m - th) * (-k * d).exp();
            }
            start = self.breakpoints[i];
            if start >= t {
                break;
            }
        }
        acc
    }
}

impl MarkovSwitchingClock {
    pub fn validate(&self) -> Result<()> {
        let m = self.levels.len();
        if m == 0 || self.generator.len() != m || self.initial_dist.len() != m {
            return Err(Error::Dimension(format!(
                "generator has {} rows, levels {} and initial_dist {} entries",
                self.generator.len(),
                m,
                self.initial_dist.len()
            )));
        }
        for (i, row) in self.generator.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Dimension(format!("generator row {i} has {} entries, expected {m}", row.len())));
            }
            let s: f64 = row.iter().sum();
            if s.abs() > 1e-12 {
                return Err(Error::InvalidSpec(format!("generator row {i} sums to {s}, expected 0")));
            }
            for (j, &q) in row.iter().enumerate() {
                if i != j && q < 0.0 {
                    return Err(Error::InvalidSpec(format!("negative off-diagonal rate at ({i},{j})")));
                }
            }
        }
        if self.levels.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidSpec("activity levels must be non-negative".into()));
        }
        if self.initial_dist.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidSpec("initial distribution has negative entries".into()));
        }
        let s: f64 = self.initial_dist.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!("initial distribution sums to {s}, expected 1")));
        }
        Ok(())
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        let m = self.levels.len();
        DMatrix::from_fn(m, m, |i, j| self.generator[i][j])
    }

    /// `expm((Q - z D) tau) 1` for each starting state.
    fn min_level(&self) -> f64 {
        self.levels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Row sums of `expm(tau (Q - z D + s I))` with `s = z min(levels)`, and
    /// `s tau`. The shift keeps the matrix exponential away from underflow
    /// for large `|z|`; the unshifted sums are `rows * exp(-s tau)`.
    fn killed_row_sums(&self, tau: f64, z: Complex64) -> Result<(Vec<Complex64>, Complex64)> {
        let m = self.levels.len();
        let lmin = self.min_level();
        let a = DMatrix::from_fn(m, m, |i, j| {
            let d = if i == j { z * (self.levels[i] - lmin) } else { Complex64::new(0.0, 0.0) };
            (Complex64::new(self.generator[i][j], 0.0) - d) * tau
        });
        let e = expm(&a)?;
        Ok(((0..m).map(|i| e.row(i).iter().sum()).collect(), z * lmin * tau))
    }

    fn killed_row_sums_real(&self, tau: f64, lambda: f64) -> Result<(Vec<f64>, f64)> {
        let m = self.levels.len();
        let lmin = self.min_level();
        let a = DMatrix::from_fn(m, m, |i, j| {
            let d = if i == j { lambda * (self.levels[i] - lmin) } else { 0.0 };
            (self.generator[i][j] - d) * tau
        });
        let e = expm(&a)?;
        Ok(((0..m).map(|i| e.row(i).iter().sum()).collect(), lambda * lmin * tau))
    }

    pub fn mean_variance(&self, s: f64) -> f64 {
        let m = self.levels.len();
        let p = expm(&(self.q_matrix() * s)).expect("finite generator");
        (0..m).map(|i| (0..m).map(|j| self.initial_dist[i] * p[(i, j)] * self.levels[j]).sum::<f64>()).sum()
    }

    pub fn expected_clock(&self, t: f64) -> f64 {
        quad::integrate(|s| self.mean_variance(s), 0.0, t, 1e-12, 1e-14, 200).map(|r| r.value).unwrap_or(f64::NAN)
    }
}

impl TwoFactorCirClock {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight > 0.0 && self.weight < 1.0) {
            return Err(Error::InvalidSpec(format!("factor weight must lie in (0,1), got {}", self.weight)));
        }
        self.fast.validate()?;
        self.slow.validate()?;
        if self.fast.kappa <= self.slow.kappa {
            return Err(Error::InvalidSpec("fast factor must mean-revert faster than the slow factor".into()));
        }
        Ok(())
    }
}

impl ClockSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ClockSpec::Cir(_) => "cir",
            ClockSpec::TimeDepCir(_) => "tdcir",
            ClockSpec::SquaredOu(_) => "sqou",
            ClockSpec::MarkovSwitching(_) => "markov",
            ClockSpec::TwoFactorCir(_) => "cir2",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ClockSpec::Cir(c) => c.validate(),
            ClockSpec::TimeDepCir(c) => c.validate(),
            ClockSpec::SquaredOu(c) => c.validate(),
            ClockSpec::MarkovSwitching(c) => c.validate(),
            ClockSpec::TwoFactorCir(c) => c.validate(),
        }
    }

    /// Non-fatal diagnostics (Feller violations).
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let mut check = |name: &str, c: &CirClock| {
            if !c.feller() {
                w.push(format!("{name}: Feller condition 2*kappa*theta > xi^2 violated"));
            }
        };
        match self {
            ClockSpec::Cir(c) => check("cir", c),
            ClockSpec::TwoFactorCir(c) => {
                check("fast", &c.fast);
                check("slow", &c.slow)
            }
            ClockSpec::TimeDepCir(c) => {
                for i in 0..c.kappa.len() {
                    check(&format!("segment {i}"), &CirClock::new(c.kappa[i], c.theta[i], c.xi[i], c.v0));
                }
            }
            _ => {}
        }
        w
    }

    /// Initial factor state (variance for CIR, OU state for squared OU).
    pub fn initial_state(&self) -> Option<f64> {
        match self {
            ClockSpec::Cir(c) => Some(c.v0),
            ClockSpec::TimeDepCir(c) => Some(c.v0),
            ClockSpec::SquaredOu(c) => Some(c.y0),
            _ => None,
        }
    }

    /// `E[v_s]`.
    pub fn mean_variance(&self, s: f64) -> f64 {
        match self {
            ClockSpec::Cir(c) => c.mean_variance(s),
            ClockSpec::TimeDepCir(c) => c.mean_variance(s),
            ClockSpec::SquaredOu(c) => c.mean_variance(s),
            ClockSpec::MarkovSwitching(c) => c.mean_variance(s),
            ClockSpec::TwoFactorCir(c) => {
                c.weight * c.fast.mean_variance(s) + (1.0 - c.weight) * c.slow.mean_variance(s)
            }
        }
    }

    /// `E[Gamma_T]`.
    pub fn expected_clock(&self, t: f64) -> f64 {
        match self {
            ClockSpec::Cir(c) => c.expected_clock(t),
            ClockSpec::TimeDepCir(c) => c.expected_clock(t),
            ClockSpec::SquaredOu(c) => c.expected_clock(t),
            ClockSpec::MarkovSwitching(c) => c.expected_clock(t),
            ClockSpec::TwoFactorCir(c) => {
                c.weight * c.fast.expected_clock(t) + (1.0 - c.weight) * c.slow.expected_clock(t)
            }
        }
    }

    /// `log Phi_T(lambda)` for real `lambda >= 0`.
    pub fn log_phi(&self, t: f64, lambda: f64) -> Result<f64> {
        check_args(t, lambda)?;
        if lambda == 0.0 {
            return Ok(0.0);
        }
        match self {
            ClockSpec::Cir(c) => Ok(log_phi_cir(c, t, lambda)),
            ClockSpec::TimeDepCir(c) => log_phi_tdcir(c, 0.0, t, lambda, c.v0),
            ClockSpec::SquaredOu(c) => log_phi_sqou_numeric(c, t, lambda, c.y0),
            ClockSpec::MarkovSwitching(c) => {
                let (rows, shift) = c.killed_row_sums_real(t, lambda)?;
                let p: f64 = rows.iter().zip(&c.initial_dist).map(|(r, a)| r * a).sum();
                Ok(clamp_prob(p)?.ln() - shift)
            }
            ClockSpec::TwoFactorCir(c) => {
                Ok(log_phi_cir(&c.fast, t, c.weight * lambda) + log_phi_cir(&c.slow, t, (1.0 - c.weight) * lambda))
            }
        }
    }

    pub fn phi(&self, t: f64, lambda: f64) -> Result<f64> {
        self.log_phi(t, lambda).map(exp_floor)
    }

    /// `log Phi_T(z)` continued to complex arguments with `Re z` above the
    /// moment-explosion abscissa.
    pub fn log_phi_complex(&self, t: f64, z: Complex64) -> Result<Complex64> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {t}")));
        }
        if z == Complex64::new(0.0, 0.0) {
            return Ok(z);
        }
        let out = match self {
            ClockSpec::Cir(c) => {
                let (ia, b) = riccati_const_c(c.kappa, 0.5 * c.xi * c.xi, z, t);
                -(ia * (c.kappa * c.theta)) - b * c.v0
            }
            ClockSpec::TwoFactorCir(c) => {
                let one = |f: &CirClock, zz: Complex64| {
                    let (ia, b) = riccati_const_c(f.kappa, 0.5 * f.xi * f.xi, zz, t);
                    -(ia * (f.kappa * f.theta)) - b * f.v0
                };
                one(&c.fast, z * c.weight) + one(&c.slow, z * (1.0 - c.weight))
            }
            ClockSpec::TimeDepCir(c) => {
                c.covers(t)?;
                let tol = OdeTol::default();
                let mut y = [Complex64::new(0.0, 0.0); 2];
                for (a, b) in segments_backward(&c.breakpoints, 0.0, t) {
                    let (k, th, xi) = c.coefficients(0.5 * (a + b));
                    let (ta, tb) = (t - b, t - a);
                    y = dopri5(
                        |_, s: &[Complex64; 2]| [s[1] * (k * th), z - s[1] * k - s[1] * s[1] * (0.5 * xi * xi)],
                        ta,
                        tb,
                        y,
                        &tol,
                    )
                    .map_err(|e| Error::Integration { lambda: format!("{z}"), detail: e.to_string() })?;
                }
                -y[0] - y[1] * c.v0
            }
            ClockSpec::SquaredOu(c) => {
                let (s2, a) = (c.sigma * c.sigma, c.alpha);
                let y = dopri5(
                    |_, s: &[Complex64; 2]| [s[1] * s2, z - s[1] * (2.0 * a) - s[1] * s[1] * (2.0 * s2)],
                    0.0,
                    t,
                    [Complex64::new(0.0, 0.0); 2],
                    &OdeTol::default(),
                )
                .map_err(|e| Error::Integration { lambda: format!("{z}"), detail: e.to_string() })?;
                -y[0] - y[1] * (c.y0 * c.y0)
            }
            ClockSpec::MarkovSwitching(c) => {
                let (rows, shift) = c.killed_row_sums(t, z)?;
                let p: Complex64 = rows.iter().zip(&c.initial_dist).map(|(r, a)| r * a).sum();
                p.ln() - shift
            }
        };
        if !(out.re.is_finite() && out.im.is_finite()) {
            return Err(Error::Integration { lambda: format!("{z}"), detail: "transform continuation blew up".into() });
        }
        Ok(out)
    }

    /// Riccati coefficients `(A, B)` over horizon `tau` for constant-coefficient
    /// one-factor families, so that `Phi = exp(-A - B s(y))`.
    pub fn riccati_ab(&self, tau: f64, lambda: f64) -> Result<(f64, f64)> {
        match self {
            ClockSpec::Cir(c) => {
                let (ia, b) = riccati_const(c.kappa, 0.5 * c.xi * c.xi, lambda, tau);
                Ok((c.kappa * c.theta * ia, b))
            }
            ClockSpec::SquaredOu(c) => {
                let s2 = c.sigma * c.sigma;
                let (ia, b) = riccati_const(2.0 * c.alpha, 2.0 * s2, lambda, tau);
                Ok((s2 * ia, b))
            }
            _ => Err(Error::Unsupported(format!("closed-form Riccati coefficients for {}", self.family()))),
        }
    }

    /// Canonical parameter text rounded to 15 significant digits.
    pub fn canonical(&self) -> String {
        let v = |xs: &[f64]| xs.iter().map(|&x| sig15(x)).collect::<Vec<_>>().join(",");
        match self {
            ClockSpec::Cir(c) => format!("cir|{}", v(&[c.kappa, c.theta, c.xi, c.v0])),
            ClockSpec::TimeDepCir(c) => format!(
                "tdcir|b={}|k={}|th={}|xi={}|v0={}",
                v(&c.breakpoints),
                v(&c.kappa),
                v(&c.theta),
                v(&c.xi),
                sig15(c.v0)
            ),
            ClockSpec::SquaredOu(c) => format!("sqou|{}", v(&[c.alpha, c.sigma, c.y0])),
            ClockSpec::MarkovSwitching(c) => format!(
                "markov|q={}|lv={}|a={}",
                c.generator.iter().map(|r| v(r)).collect::<Vec<_>>().join(";"),
                v(&c.levels),
                v(&c.initial_dist)
            ),
            ClockSpec::TwoFactorCir(c) => format!(
                "cir2|w={}|f={}|s={}",
                sig15(c.weight),
                v(&[c.fast.kappa, c.fast.theta, c.fast.xi, c.fast.v0]),
                v(&[c.slow.kappa, c.slow.theta, c.slow.xi, c.slow.v0])
            ),
        }
    }

    pub fn digest(&self) -> String {
        digest_text(&self.canonical())
    }
}

/// Formats a float with 15 significant digits.
pub fn sig15(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else {
        format!("{x:.14e}")
    }
}

pub fn digest_text(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

fn check_args(t: f64, lambda: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("horizon must be positive, got {t}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> Result<f64> {
    if p > 1.0 {
        if p - 1.0 <= 1e-12 {
            return Ok(1.0);
        }
        return Err(Error::Numerical(format!("transform value {p} exceeds one")));
    }
    if p <= 0.0 {
        if p > -1e-12 {
            return Ok(f64::MIN_POSITIVE);
        }
        return Err(Error::Numerical(format!("transform value {p} is negative")));
    }
    Ok(p)
}

pub fn exp_floor(log_phi: f64) -> f64 {
    if log_phi < LOG_UNDERFLOW {
        0.0
    } else {
        log_phi.exp()
    }
}

/// Solution of `B' = lambda - k B - q B^2`, `B(0) = 0`, returning `(int_0^tau B, B(tau))`.
pub fn riccati_const(k: f64, q: f64, lambda: f64, tau: f64) -> (f64, f64) {
    if lambda == 0.0 {
        return (0.0, 0.0);
    }
    let gamma = (k * k + 4.0 * q * lambda).sqrt();
    let gpk = gamma + k;
    // gamma - k without cancellation
    let gmk = 4.0 * q * lambda / gpk;
    let e = (-gamma * tau).exp();
    let b = 2.0 * lambda * (1.0 - e) / (gpk + gmk * e);
    let g = gmk / gpk;
    let int_b = 2.0 * lambda / gpk * tau + ((g * e).ln_1p() - g.ln_1p()) / q;
    (int_b, b)
}

fn cln_1p(z: Complex64) -> Complex64 {
    if z.norm() < 1e-4 {
        z - z * z / 2.0 + z * z * z / 3.0 - z * z * z * z / 4.0
    } else {
        (Complex64::new(1.0, 0.0) + z).ln()
    }
}

/// Complex-argument version of [`riccati_const`], continuous in `z` because
/// only `exp(-gamma tau)` with `Re gamma >= 0` enters the logarithm.
pub fn riccati_const_c(k: f64, q: f64, z: Complex64, tau: f64) -> (Complex64, Complex64) {
    let gamma = (Complex64::new(k * k, 0.0) + z * (4.0 * q)).sqrt();
    let gpk = gamma + k;
    let gmk = z * (4.0 * q) / gpk;
    let e = (-gamma * tau).exp();
    let b = z * 2.0 * (Complex64::new(1.0, 0.0) - e) / (gpk + gmk * e);
    let g = gmk / gpk;
    let int_b = z * 2.0 / gpk * tau + (cln_1p(g * e) - cln_1p(g)) / q;
    (int_b, b)
}

fn log_phi_cir(c: &CirClock, t: f64, lambda: f64) -> f64 {
    let (ia, b) = riccati_const(c.kappa, 0.5 * c.xi * c.xi, lambda, t);
    -c.kappa * c.theta * ia - b * c.v0
}

/// Calendar segments `[a, b]` between `t` and `t_end`, listed from the latest.
fn segments_backward(breaks: &[f64], t: f64, t_end: f64) -> Vec<(f64, f64)> {
    let mut cuts = vec![t];
    cuts.extend(breaks.iter().copied().filter(|&b| b > t && b < t_end));
    cuts.push(t_end);
    let mut segs: Vec<(f64, f64)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();
    segs.reverse();
    segs
}

/// Integrates the time-dependent Riccati system from calendar `t_end` back to
/// `t`; returns `(A, B)`.
fn tdcir_ab(c: &TimeDepCirClock, t: f64, t_end: f64, lambda: f64) -> Result<(f64, f64)> {
    c.covers(t_end)?;
    let tol = OdeTol::default();
    let mut y = [0.0f64; 2];
    for (a, b) in segments_backward(&c.breakpoints, t, t_end) {
        let (k, th, xi) = c.coefficients(0.5 * (a + b));
        let q = 0.5 * xi * xi;
        y = dopri5(|_, s: &[f64; 2]| [k * th * s[1], lambda - k * s[1] - q * s[1] * s[1]], t_end - b, t_end - a, y, &tol)
            .map_err(|e| Error::Integration {
                lambda: format!("{lambda}"),
                detail: format!("segment [{a}, {b}]: {e}"),
            })?;
    }
    Ok((y[0], y[1]))
}

fn log_phi_tdcir(c: &TimeDepCirClock, t: f64, t_end: f64, lambda: f64, v: f64) -> Result<f64> {
    let (a, b) = tdcir_ab(c, t, t_end, lambda)?;
    Ok(-a - b * v)
}

fn sqou_ab_numeric(c: &SquaredOuClock, tau: f64, lambda: f64) -> Result<(f64, f64)> {
    let s2 = c.sigma * c.sigma;
    let a = c.alpha;
    let y = dopri5(
        |_, s: &[f64; 2]| [s2 * s[1], lambda - 2.0 * a * s[1] - 2.0 * s2 * s[1] * s[1]],
        0.0,
        tau,
        [0.0; 2],
        &OdeTol::default(),
    )
    .map_err(|e| Error::Integration { lambda: format!("{lambda}"), detail: e.to_string() })?;
    Ok((y[0], y[1]))
}

fn log_phi_sqou_numeric(c: &SquaredOuClock, t: f64, lambda: f64, y: f64) -> Result<f64> {
    let (a, b) = sqou_ab_numeric(c, t, lambda)?;
    Ok(-a - b * y * y)
}

/// Closed-form CIR transform.
pub fn phi_cir_closed_form(spec: &CirClock, t: f64, lambda: f64) -> Result<f64> {
    spec.validate()?;
    check_args(t, lambda)?;
    Ok(exp_floor(log_phi_cir(spec, t, lambda)))
}

/// CIR or time-dependent CIR transform by adaptive Runge-Kutta integration of
/// the Riccati system.
pub fn phi_riccati_numeric(spec: &ClockSpec, t: f64, lambda: f64) -> Result<f64> {
    spec.validate()?;
    check_args(t, lambda)?;
    if lambda == 0.0 {
        return Ok(1.0);
    }
    let log = match spec {
        ClockSpec::Cir(c) => {
            let td = TimeDepCirClock {
                breakpoints: vec![t],
                kappa: vec![c.kappa],
                theta: vec![c.theta],
                xi: vec![c.xi],
                v0: c.v0,
            };
            log_phi_tdcir(&td, 0.0, t, lambda, c.v0)?
        }
        ClockSpec::TimeDepCir(c) => log_phi_tdcir(c, 0.0, t, lambda, c.v0)?,
        other => return Err(Error::Unsupported(format!("numeric CIR Riccati for family {}", other.family()))),
    };
    Ok(exp_floor(log))
}

/// Squared OU transform by numerical integration of its Riccati system.
pub fn phi_squared_ou(spec: &SquaredOuClock, t: f64, lambda: f64) -> Result<f64> {
    spec.validate()?;
    check_args(t, lambda)?;
    if lambda == 0.0 {
        return Ok(1.0);
    }
    log_phi_sqou_numeric(spec, t, lambda, spec.y0).map(exp_floor)
}

/// Markov-switching transform `alpha^T expm((Q - lambda D) T) 1`.
pub fn phi_markov_switching(spec: &MarkovSwitchingClock, t: f64, lambda: f64) -> Result<f64> {
    spec.validate()?;
    check_args(t, lambda)?;
    let (rows, shift) = spec.killed_row_sums_real(t, lambda)?;
    let p = clamp_prob(rows.iter().zip(&spec.initial_dist).map(|(r, a)| r * a).sum())?;
    Ok(exp_floor(p.ln() - shift))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalTransform {
    pub phi: f64,
    /// `d Phi / d y`; absent for the Markov chain whose state is discrete.
    pub dphi_dy: Option<f64>,
}

/// Conditional transform `Phi_{t,T}(lambda; y)` and its state derivative. The
/// state `y` is the variance for CIR families, the signed OU state for squared
/// OU, and the state index for the Markov chain.
pub fn phi_conditional(spec: &ClockSpec, t: f64, t_end: f64, lambda: f64, y: f64) -> Result<ConditionalTransform> {
    if !(t >= 0.0 && t < t_end) {
        return Err(Error::Domain(format!("need 0 <= t < T, got t={t}, T={t_end}")));
    }
    check_args(t_end - t, lambda)?;
    let tau = t_end - t;
    let (a, b, s, ds) = match spec {
        ClockSpec::Cir(c) => {
            if y < 0.0 {
                return Err(Error::Domain(format!("CIR state must be non-negative, got {y}")));
            }
            let (ia, b) = riccati_const(c.kappa, 0.5 * c.xi * c.xi, lambda, tau);
            (c.kappa * c.theta * ia, b, y, 1.0)
        }
        ClockSpec::TimeDepCir(c) => {
            if y < 0.0 {
                return Err(Error::Domain(format!("CIR state must be non-negative, got {y}")));
            }
            let (a, b) = tdcir_ab(c, t, t_end, lambda)?;
            (a, b, y, 1.0)
        }
        ClockSpec::SquaredOu(c) => {
            let (a, b) = sqou_ab_numeric(c, tau, lambda)?;
            (a, b, y * y, 2.0 * y)
        }
        ClockSpec::MarkovSwitching(c) => {
            let i = y.round();
            if (y - i).abs() > 1e-12 || i < 0.0 || i as usize >= c.levels.len() {
                return Err(Error::Domain(format!("Markov state index {y} out of range")));
            }
            let (rows, shift) = c.killed_row_sums_real(tau, lambda)?;
            return Ok(ConditionalTransform { phi: exp_floor(clamp_prob(rows[i as usize])?.ln() - shift), dphi_dy: None });
        }
        ClockSpec::TwoFactorCir(_) => {
            return Err(Error::Unsupported("conditional transform of the two-factor clock needs a 2-d state".into()))
        }
    };
    let phi = exp_floor(-a - b * s);
    Ok(ConditionalTransform { phi, dphi_dy: Some(-b * ds * phi) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheKey {
    pub digest: String,
    pub t: f64,
    pub horizon: f64,
}

/// Immutable table of `log Phi` on a sorted positive grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformCache {
    pub key: CacheKey,
    pub grid: Vec<f64>,
    pub log_values: Vec<f64>,
    pub conditional_state: Option<f64>,
}

impl TransformCache {
    pub fn values(&self) -> Vec<f64> {
        self.log_values.iter().map(|&l| exp_floor(l)).collect()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn phi(&self, i: usize) -> f64 {
        exp_floor(self.log_values[i])
    }

    /// Exact lookup of a grid point.
    pub fn lookup(&self, lambda: f64) -> Option<f64> {
        self.grid.binary_search_by(|g| g.total_cmp(&lambda)).ok().map(|i| self.phi(i))
    }

    pub fn matches(&self, spec: &ClockSpec, t: f64, horizon: f64) -> bool {
        self.key.digest == spec.digest() && self.key.t == t && self.key.horizon == horizon
    }
}

/// Tabulates the (conditional) transform on `grid`.
pub fn build_transform_cache(
    spec: &ClockSpec,
    t: f64,
    horizon: f64,
    grid: &[f64],
    y: Option<f64>,
) -> Result<TransformCache> {
    spec.validate()?;
    if grid.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
        return Err(Error::Domain("transform grid must be positive and finite".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("transform grid must be strictly increasing".into()));
    }
    let mut log_values = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let lv = match y {
            None if t == 0.0 => spec.log_phi(horizon, lambda),
            _ => {
                let state = y.or(spec.initial_state()).unwrap_or(0.0);
                phi_conditional(spec, t, horizon, lambda, state).map(|c| c.phi.ln())
            }
        }
        .map_err(|e| match e {
            Error::Integration { detail, .. } => Error::Integration { lambda: format!("{lambda}"), detail },
            other => other,
        })?;
        log_values.push(lv);
    }
    Ok(TransformCache {
        key: CacheKey { digest: spec.digest(), t, horizon },
        grid: grid.to_vec(),
        log_values,
        conditional_state: y,
    })
}
