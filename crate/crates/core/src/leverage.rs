//! Leverage layer: coefficients of the expansion `u = sum rho^n u_n` of a
//! barrier value in the spot/variance correlation, their Taylor and Pade
//! resummations, and the residual-based error indicator.
//!
//! The decoupled generator is
//!
//! ```text
//! L0 f = beta v(y) f_x + b(y) f_y + v(y) f_xx / 2 + a(y)^2 f_yy / 2,
//! L1 f = a(y) sqrt(v(y)) f_xy,
//! ```
//!
//! and `(d_t + L0) u_n = -L1 u_{n-1}` with zero terminal and boundary data, so
//! by Feynman-Kac `u_n(t) = E[int_t^T (L1 u_{n-1})(s, X_s, Y_s) 1{tau > s} ds]`.
//!
//! All `u_n` are carried in price units (the constant discount factor
//! `P(0,T)` is folded in).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{self, dko_coefficients, SingleBarrierKernel, DKO_N_MAX};
use crate::clock::{phi_conditional, ClockSpec};
use crate::error::{Error, Result};
use crate::market::{BarrierContract, ContractKind, MarketEnv, BETA};
use crate::mc::{path_mean, path_rng, simulate_clock_path, McConfig, NormalSource};
use crate::numerics::interp::{bicubic, UniformAxis};
use crate::numerics::linalg::solve_tridiagonal;
use crate::numerics::quad::{self, QuadratureConfig};

/// Closest distance to a barrier at which the mixed derivative is evaluated.
pub const BARRIER_EPS: f64 = 1e-6;

/// Width of the log-strike band used to mollify the payoff kink when
/// differentiating the baseline.
pub const STRIKE_SMOOTHING: f64 = 1e-3;

/// Frequency step of the trapezoid rule used for tabulated forcing. The
/// integrands are even in `u` and analytic in a strip, so the rule converges
/// geometrically.
pub const FORCING_DU: f64 = 0.1;

const MAX_FREQ: f64 = 2500.0;

/// Variance-factor dynamics of the decoupled generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factor {
    /// `dv = kappa (theta - v) dt + xi sqrt(v) dW`, state `y = v`.
    Cir { kappa: f64, theta: f64, xi: f64 },
    /// `dY = -alpha Y dt + sigma dW`, `v = Y^2`.
    SquaredOu { alpha: f64, sigma: f64 },
}

impl Factor {
    pub fn from_spec(spec: &ClockSpec) -> Result<Self> {
        match spec {
            ClockSpec::Cir(c) => Ok(Factor::Cir { kappa: c.kappa, theta: c.theta, xi: c.xi }),
            ClockSpec::SquaredOu(c) => Ok(Factor::SquaredOu { alpha: c.alpha, sigma: c.sigma }),
            other => Err(Error::Unsupported(format!("leverage expansion for clock family {}", other.family()))),
        }
    }

    pub fn variance(&self, y: f64) -> f64 {
        match self {
            Factor::Cir { .. } => y.max(0.0),
            Factor::SquaredOu { .. } => y * y,
        }
    }

    pub fn drift(&self, y: f64) -> f64 {
        match *self {
            Factor::Cir { kappa, theta, .. } => kappa * (theta - y),
            Factor::SquaredOu { alpha, .. } => -alpha * y,
        }
    }

    /// Squared diffusion coefficient `a(y)^2`.
    pub fn diffusion_sq(&self, y: f64) -> f64 {
        match *self {
            Factor::Cir { xi, .. } => xi * xi * y.max(0.0),
            Factor::SquaredOu { sigma, .. } => sigma * sigma,
        }
    }

    /// `a(y) sqrt(v(y))`, the prefactor of the mixed derivative.
    pub fn leverage(&self, y: f64) -> f64 {
        match *self {
            Factor::Cir { xi, .. } => xi * y.max(0.0),
            Factor::SquaredOu { sigma, .. } => sigma * y.abs(),
        }
    }

    /// Affine state `s(y)` with `Phi = exp(-A - B s)`, and `ds/dy`.
    fn affine_state(&self, y: f64) -> (f64, f64) {
        match self {
            Factor::Cir { .. } => (y, 1.0),
            Factor::SquaredOu { .. } => (y * y, 2.0 * y),
        }
    }

    /// State axis wide enough for the factor over `[0, t]`.
    pub fn state_axis(&self, spec: &ClockSpec, t: f64, n: usize) -> UniformAxis {
        let y0 = spec.initial_state().unwrap_or(0.0);
        match *self {
            Factor::Cir { theta, xi, .. } => {
                let top = y0.max(theta) + 8.0 * xi * (y0.max(theta) * t).sqrt();
                UniformAxis::new(0.0, top, n)
            }
            Factor::SquaredOu { alpha, sigma } => {
                let sd = sigma * ((1.0 - (-2.0 * alpha * t).exp()) / (2.0 * alpha)).sqrt();
                let top = y0.abs() + 7.0 * sd;
                UniformAxis::new(-top, top, n)
            }
        }
    }
}

/// Spectral form `u0 = disc * (base(x) + sum_m w_m(x) Phi(lambda_m; y))` of the
/// baseline, discretised in the frequency variable.
#[derive(Debug, Clone)]
enum Spectral {
    Single { kernel: SingleBarrierKernel, du: f64 },
    Dko { l: f64, a: f64, coeffs: Vec<f64> },
}

impl Spectral {
    fn new(contract: &BarrierContract, du: f64) -> Result<Self> {
        match contract.kind {
            ContractKind::UpOutPut | ContractKind::DownOutCall => {
                Ok(Spectral::Single { kernel: SingleBarrierKernel::new(contract)?, du })
            }
            _ => {
                let (l, h) = (contract.log_lower().unwrap(), contract.log_upper().unwrap());
                Ok(Spectral::Dko { l, a: h - l, coeffs: dko_coefficients(contract, DKO_N_MAX)? })
            }
        }
    }

    fn cap(&self) -> usize {
        match self {
            Spectral::Single { du, .. } => (MAX_FREQ / du) as usize,
            Spectral::Dko { coeffs, .. } => coeffs.len(),
        }
    }

    /// Frequency of node `m >= 1`.
    fn freq(&self, m: usize) -> f64 {
        match self {
            Spectral::Single { du, .. } => m as f64 * du,
            Spectral::Dko { a, .. } => m as f64 * PI / a,
        }
    }

    fn lambda(&self, m: usize) -> f64 {
        barrier::lambda_of(self.freq(m), BETA)
    }

    /// `(w_m(x), w_m'(x))`.
    fn node(&self, m: usize, x: f64, smooth: f64) -> (f64, f64) {
        match self {
            Spectral::Single { kernel, du } => {
                let (k, dk) = kernel.kernel(x, m as f64 * du, smooth);
                (k * du, dk * du)
            }
            Spectral::Dko { l, a, coeffs } => {
                let w = m as f64 * PI / a;
                let (s, c) = (w * (x - l)).sin_cos();
                let e = (-BETA * x).exp() * 2.0 / a * coeffs[m - 1];
                (e * s, e * (-BETA * s + w * c))
            }
        }
    }

    fn inside(&self, x: f64) -> bool {
        match self {
            Spectral::Single { kernel, .. } => kernel.distance(x) > 0.0,
            Spectral::Dko { l, a, .. } => x > *l && x < l + a,
        }
    }
}

/// Time-sliced field on a uniform `(x, y)` grid, row-major `[ix * ny + iy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedField {
    pub times: Vec<f64>,
    pub xa: UniformAxis,
    pub ya: UniformAxis,
    pub slices: Vec<Vec<f64>>,
}

impl SlicedField {
    fn zeros(times: Vec<f64>, xa: UniformAxis, ya: UniformAxis) -> Self {
        let n = xa.len * ya.len;
        let slices = vec![vec![0.0; n]; times.len()];
        Self { times, xa, ya, slices }
    }

    pub fn eval(&self, k: usize, x: f64, y: f64) -> f64 {
        bicubic(&self.xa, &self.ya, &self.slices[k], x, y)
    }

    pub fn sup_norm(&self, k: usize) -> f64 {
        self.slices[k].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.slices.iter().all(|s| s.iter().all(|v| *v == 0.0))
    }
}

/// Frequency nodes needed at horizon `tau` so that the transform derivative
/// has decayed below round-off for every state with `s >= s_lo`; returns the
/// Riccati pairs for `m = 1..=M`.
fn active_nodes(spec: &ClockSpec, sp: &Spectral, tau: f64, s_lo: f64) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    let mut peak: f64 = 0.0;
    for m in 1..=sp.cap() {
        let (a, b) = spec.riccati_ab(tau, sp.lambda(m))?;
        let env = (1.0 + sp.freq(m)) * b * (-a - b * s_lo).exp();
        peak = peak.max(env);
        out.push((a, b));
        if m >= 16 && env < 1e-15 * peak {
            break;
        }
    }
    Ok(out)
}

/// Tabulates the first-order forcing `(L1 u0)(t, x, y)` at the given times on
/// the `(xa, ya)` grid. Nodes on or outside a barrier are zero.
pub fn baseline_forcing_field(
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    times: &[f64],
    xa: UniformAxis,
    ya: UniformAxis,
) -> Result<SlicedField> {
    let factor = Factor::from_spec(spec)?;
    let t_end = contract.maturity;
    let sp = Spectral::new(contract, FORCING_DU)?;
    let disc = market.discount(t_end);
    let ys = ya.points();
    let s_lo = ys
        .iter()
        .map(|y| factor.affine_state(*y).0)
        .filter(|s| *s > 1e-12)
        .fold(f64::INFINITY, f64::min);
    let s_lo = if s_lo.is_finite() { s_lo } else { 1e-3 };
    let nodes: Vec<Vec<(f64, f64)>> = times
        .par_iter()
        .map(|&t| {
            let tau = t_end - t;
            if tau <= 0.0 {
                Ok(Vec::new())
            } else {
                active_nodes(spec, &sp, tau, s_lo)
            }
        })
        .collect::<Result<_>>()?;
    let m_max = nodes.iter().map(Vec::len).max().unwrap_or(0);
    let xs = xa.points();
    let w = DMatrix::from_fn(xa.len, m_max.max(1), |i, m| {
        if m < m_max && sp.inside(xs[i]) {
            sp.node(m + 1, xs[i], STRIKE_SMOOTHING).1
        } else {
            0.0
        }
    });
    let prefactor: Vec<f64> = ys.iter().map(|y| disc * factor.leverage(*y)).collect();
    let slices: Vec<Vec<f64>> = nodes
        .par_iter()
        .map(|ab| {
            let mut out = vec![0.0; xa.len * ya.len];
            if ab.is_empty() {
                return out;
            }
            let g = DMatrix::from_fn(ab.len(), ya.len, |m, j| {
                let (a, b) = ab[m];
                let (s, ds) = factor.affine_state(ys[j]);
                -b * ds * (-a - b * s).exp()
            });
            let f = w.columns(0, ab.len()) * g;
            for i in 0..xa.len {
                for j in 0..ya.len {
                    out[i * ya.len + j] = prefactor[j] * f[(i, j)];
                }
            }
            out
        })
        .collect();
    Ok(SlicedField { times: times.to_vec(), xa, ya, slices })
}

fn check_interior(contract: &BarrierContract, x: f64, eps: f64) -> Result<()> {
    let inside_up = contract.log_upper().map_or(true, |h| x < h - eps);
    let inside_dn = contract.log_lower().map_or(true, |l| x > l + eps);
    if inside_up && inside_dn {
        Ok(())
    } else {
        Err(Error::Geometry(format!("point x = {x} is within {eps} of a barrier or outside the domain")))
    }
}

/// Baseline value `u0(t, x, y)` in price units: the independent-clock barrier
/// formula with the conditional transform of the remaining clock.
pub fn baseline_u0(t: f64, x: f64, y: f64, contract: &BarrierContract, market: &MarketEnv, spec: &ClockSpec) -> Result<f64> {
    baseline_u0_with(t, x, y, contract, market, spec, &QuadratureConfig::default())
}

pub fn baseline_u0_with(
    t: f64,
    x: f64,
    y: f64,
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    contract.validate()?;
    let t_end = contract.maturity;
    if !(0.0..=t_end).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, {t_end}]")));
    }
    let disc = market.discount(t_end);
    let inside = contract.log_upper().map_or(true, |h| x < h) && contract.log_lower().map_or(true, |l| x > l);
    if !inside {
        return Ok(0.0);
    }
    if t == t_end {
        return Ok(disc * contract.payoff(x.exp()));
    }
    let phi = |lambda: f64| phi_conditional(spec, t, t_end, lambda, y).map(|c| c.phi);
    match contract.kind {
        ContractKind::UpOutPut | ContractKind::DownOutCall => {
            let k = SingleBarrierKernel::new(contract)?;
            Ok(disc * k.value(x, &phi, cfg)?)
        }
        _ => {
            let (l, h) = (contract.log_lower().unwrap(), contract.log_upper().unwrap());
            let mut n = 64;
            loop {
                let coeffs = dko_coefficients(contract, n)?;
                let phis: Vec<f64> =
                    barrier::dirichlet_grid(h - l, n).into_iter().map(phi).collect::<Result<_>>()?;
                match barrier::dko_series(x, l, h, &coeffs, &phis, cfg.abs_tol) {
                    Ok((v, _)) => return Ok(disc * v),
                    Err(Error::Convergence { .. }) if n < DKO_N_MAX => n = (2 * n).min(DKO_N_MAX),
                    Err(e) => return Err(e),
                }
            }
        }
    }
}

/// `(L1 u0)(t, x, y)`: the mixed derivative of the baseline with the strike
/// kink mollified over [`STRIKE_SMOOTHING`], times `a(y) sqrt(v(y))`.
pub fn forcing_mixed_derivative(
    t: f64,
    x: f64,
    y: f64,
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
) -> Result<f64> {
    let lev = Factor::from_spec(spec)?.leverage(y);
    Ok(lev * mixed_derivative_u0(t, x, y, contract, market, spec, &QuadratureConfig::default())?)
}

/// `d^2 u0 / dx dy` by differentiating the kernel in `x` and the conditional
/// transform in `y`.
pub fn mixed_derivative_u0(
    t: f64,
    x: f64,
    y: f64,
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    contract.validate()?;
    check_interior(contract, x, BARRIER_EPS)?;
    let t_end = contract.maturity;
    if !(0.0..=t_end).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, {t_end}]")));
    }
    if t == t_end {
        return Ok(0.0);
    }
    let disc = market.discount(t_end);
    let dphi = |lambda: f64| -> Result<f64> {
        phi_conditional(spec, t, t_end, lambda, y)?
            .dphi_dy
            .ok_or_else(|| Error::Unsupported("state derivative unavailable for this clock".into()))
    };
    match contract.kind {
        ContractKind::UpOutPut | ContractKind::DownOutCall => {
            let k = SingleBarrierKernel::new(contract)?;
            let osc = k.oscillation(x).max(1e-3);
            let mut err = None;
            let r = quad::integrate_semi_infinite(
                |u| {
                    let d = k.kernel(x, u, STRIKE_SMOOTHING).1;
                    match dphi(barrier::lambda_of(u, BETA)) {
                        Ok(p) => d * p,
                        Err(e) => {
                            err.get_or_insert(e);
                            0.0
                        }
                    }
                },
                PI / (2.0 * osc),
                cfg,
            );
            if let Some(e) = err {
                return Err(e);
            }
            Ok(disc * r?.value)
        }
        _ => {
            let sp = Spectral::new(contract, 0.0)?;
            let mut sum = 0.0;
            let mut small = 0;
            for m in 1..=sp.cap() {
                let term = sp.node(m, x, 0.0).1 * dphi(sp.lambda(m))?;
                sum += term;
                if term.abs() < cfg.abs_tol * sum.abs().max(1.0) {
                    small += 1;
                    if small >= 3 {
                        return Ok(disc * sum);
                    }
                } else {
                    small = 0;
                }
            }
            Err(Error::Convergence { detail: "mixed-derivative series did not settle".into(), last: vec![sum] })
        }
    }
}

/// Log-forward axis: barriers where present, otherwise `x0 -/+ width` with
/// the width set by the expected clock.
pub fn log_forward_axis(contract: &BarrierContract, market: &MarketEnv, spec: &ClockSpec, n: usize) -> UniformAxis {
    let t = contract.maturity;
    let x0 = market.x0(t);
    let sd = spec.expected_clock(t).max(1e-4).sqrt();
    let lo = contract.log_lower().unwrap_or(x0 - 6.0 * sd - 0.25);
    let hi = contract.log_upper().unwrap_or(x0 + 6.0 * sd + 0.25);
    UniformAxis::new(lo, hi, n)
}

/// Grid of the first-order forcing tables used along Monte Carlo paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableGrid {
    pub nx: usize,
    pub ny: usize,
}

impl Default for TableGrid {
    fn default() -> Self {
        Self { nx: 256, ny: 40 }
    }
}

/// Duhamel estimate `E[int_0^T f(s, X_s, Y_s) 1{tau > s} ds]` under the
/// independent-clock dynamics, with log-forward drift `beta` per unit clock.
/// Killing between monitoring dates enters through the bridge survival
/// weight; the integrand is zero from the exit step on. `forcing(k, t, x, y)`
/// is called at monitoring step `k`.
pub fn duhamel_estimate<F>(
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    cfg: &McConfig,
    beta: f64,
    forcing: F,
) -> Result<(f64, f64)>
where
    F: Fn(usize, f64, f64, f64) -> f64 + Sync,
{
    cfg.validate()?;
    spec.validate()?;
    contract.validate()?;
    let t_end = contract.maturity;
    let n = cfg.steps_for(t_end);
    let dt = t_end / n as f64;
    let x0 = market.x0(t_end);
    let (h, l) = (contract.log_upper(), contract.log_lower());
    path_mean(cfg, |i, anti| {
        let mut normals = NormalSource::new(path_rng(cfg.seed, i), anti);
        let path = simulate_clock_path(spec, t_end, n, &mut normals).expect("validated spec");
        let mut x = x0;
        let mut w = 1.0;
        let mut prev = forcing(0, 0.0, x, path.state[0]);
        let mut acc = 0.0;
        for k in 0..n {
            let dg = path.gamma[k + 1] - path.gamma[k];
            let next = x + beta * dg + dg.max(0.0).sqrt() * normals.next();
            let out = h.map_or(false, |h| next >= h) || l.map_or(false, |l| next <= l);
            if out {
                acc += 0.5 * prev * dt;
                break;
            }
            if dg > 0.0 {
                let pu = h.map_or(0.0, |h| (-2.0 * (h - x) * (h - next) / dg).exp());
                let pd = l.map_or(0.0, |l| (-2.0 * (x - l) * (next - l) / dg).exp());
                w *= (1.0 - pu) * (1.0 - pd);
            }
            x = next;
            let cur = w * forcing(k + 1, (k + 1) as f64 * dt, x, path.state[k + 1]);
            acc += 0.5 * (prev + cur) * dt;
            prev = cur;
        }
        acc
    })
}

/// First coefficient `C_1` by the Duhamel Monte Carlo estimator with
/// tabulated semi-analytic forcing. Returns the estimate and its standard
/// error.
pub fn duhamel_coefficient_1(
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    cfg: &McConfig,
) -> Result<(f64, f64)> {
    duhamel_coefficient_1_with(contract, market, spec, cfg, TableGrid::default())
}

pub fn duhamel_coefficient_1_with(
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    cfg: &McConfig,
    grid: TableGrid,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    contract.check_geometry(market)?;
    let factor = Factor::from_spec(spec)?;
    let t_end = contract.maturity;
    let n = cfg.steps_for(t_end);
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * t_end / n as f64).collect();
    let xa = log_forward_axis(contract, market, spec, grid.nx);
    let ya = factor.state_axis(spec, t_end, grid.ny);
    let table = baseline_forcing_field(contract, market, spec, &times, xa, ya)?;
    duhamel_estimate(contract, market, spec, cfg, BETA, |k, _, x, y| table.eval(k, x, y))
}

/// Resolution of the forced PDE solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeGrid {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
}

impl Default for PdeGrid {
    fn default() -> Self {
        Self { nx: 200, ny: 80, nt: 250 }
    }
}

impl PdeGrid {
    pub fn halved(&self) -> Self {
        Self { nx: self.nx / 2, ny: self.ny / 2, nt: self.nt / 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 16 || self.ny < 8 || self.nt < 8 {
            return Err(Error::InvalidSpec(format!(
                "PDE grid {}x{}x{} is too coarse; use at least 16 x-nodes, 8 y-nodes and 8 time steps",
                self.nx, self.ny, self.nt
            )));
        }
        Ok(())
    }
}

/// Operator-split solver of `(d_t + L0) u = -f` with zero terminal data and
/// Dirichlet zero on the x-boundaries (barriers or far field).
#[derive(Debug, Clone)]
pub struct ForcedPde {
    factor: Factor,
    pub xa: UniformAxis,
    pub ya: UniformAxis,
    pub times: Vec<f64>,
    x0: f64,
    y0: f64,
    contract: BarrierContract,
    market: MarketEnv,
    spec: ClockSpec,
    /// Per y-node `(lower, diag, upper)` of `L_y`.
    ly: Vec<(f64, f64, f64)>,
    upwinded: usize,
}

impl ForcedPde {
    pub fn new(contract: &BarrierContract, market: &MarketEnv, spec: &ClockSpec, grid: PdeGrid) -> Result<Self> {
        grid.validate()?;
        contract.check_geometry(market)?;
        spec.validate()?;
        let factor = Factor::from_spec(spec)?;
        let t_end = contract.maturity;
        let xa = log_forward_axis(contract, market, spec, grid.nx);
        let ya = factor.state_axis(spec, t_end, grid.ny);
        let times = (0..=grid.nt).map(|k| k as f64 * t_end / grid.nt as f64).collect();
        let dy = ya.step;
        let mut upwinded = 0;
        let ly = (0..ya.len)
            .map(|j| {
                let y = ya.at(j);
                let b = factor.drift(y);
                if j == 0 {
                    // One-sided at the lower edge: degenerate diffusion (CIR)
                    // or vanishing curvature (OU).
                    return (0.0, -b / dy, b / dy);
                }
                if j == ya.len - 1 {
                    return (-b / dy, b / dy, 0.0);
                }
                let d = 0.5 * factor.diffusion_sq(y);
                let (mut lo, mut di, mut up) = (d / (dy * dy), -2.0 * d / (dy * dy), d / (dy * dy));
                if d == 0.0 || b.abs() * dy > 2.0 * d {
                    upwinded += 1;
                    if b > 0.0 {
                        up += b / dy;
                        di -= b / dy;
                    } else {
                        lo -= b / dy;
                        di += b / dy;
                    }
                } else {
                    lo -= b / (2.0 * dy);
                    up += b / (2.0 * dy);
                }
                (lo, di, up)
            })
            .collect();
        if upwinded > ya.len / 2 {
            log::warn!("y-convection dominates on {upwinded} of {} nodes; refine the y grid", ya.len);
        }
        let x0 = market.x0(t_end);
        let y0 = spec.initial_state().unwrap_or(0.0);
        Ok(Self { factor, xa, ya, times, x0, y0, contract: *contract, market: *market, spec: spec.clone(), ly, upwinded })
    }

    /// Number of y-nodes where the convection term was upwinded.
    pub fn upwinded_nodes(&self) -> usize {
        self.upwinded
    }

    /// Semi-analytic first-order forcing on the solver grid.
    pub fn baseline_forcing(&self) -> Result<SlicedField> {
        baseline_forcing_field(&self.contract, &self.market, &self.spec, &self.times, self.xa, self.ya)
    }

    /// `L1 u` by central differences on the grid (one-sided at y-edges).
    pub fn forcing_from(&self, u: &SlicedField) -> SlicedField {
        let (nx, ny) = (self.xa.len, self.ya.len);
        let (dx, dy) = (self.xa.step, self.ya.step);
        let mut out = SlicedField::zeros(self.times.clone(), self.xa, self.ya);
        for (k, s) in u.slices.iter().enumerate() {
            let o = &mut out.slices[k];
            for i in 1..nx - 1 {
                for j in 0..ny {
                    let (jm, jp) = (j.saturating_sub(1), (j + 1).min(ny - 1));
                    let dyy = (jp - jm) as f64 * dy;
                    let d = (s[(i + 1) * ny + jp] - s[(i + 1) * ny + jm] - s[(i - 1) * ny + jp] + s[(i - 1) * ny + jm])
                        / (2.0 * dx * dyy);
                    o[i * ny + j] = self.factor.leverage(self.ya.at(j)) * d;
                }
            }
        }
        out
    }

    fn apply_lx(&self, u: &[f64], out: &mut [f64]) {
        let (nx, ny) = (self.xa.len, self.ya.len);
        let dx = self.xa.step;
        for j in 0..ny {
            let vx = 0.5 * self.factor.variance(self.ya.at(j));
            let (lo, di, up) = (vx * (1.0 / (dx * dx) + 0.5 / dx), -2.0 * vx / (dx * dx), vx * (1.0 / (dx * dx) - 0.5 / dx));
            for i in 1..nx - 1 {
                out[i * ny + j] = lo * u[(i - 1) * ny + j] + di * u[i * ny + j] + up * u[(i + 1) * ny + j];
            }
        }
    }

    fn apply_ly(&self, u: &[f64], out: &mut [f64]) {
        let (nx, ny) = (self.xa.len, self.ya.len);
        for i in 1..nx - 1 {
            let r = &u[i * ny..(i + 1) * ny];
            for j in 0..ny {
                let (lo, di, up) = self.ly[j];
                let mut v = di * r[j];
                if j > 0 {
                    v += lo * r[j - 1];
                }
                if j + 1 < ny {
                    v += up * r[j + 1];
                }
                out[i * ny + j] = v;
            }
        }
    }

    /// One Douglas step of length `h` backwards in time with implicitness
    /// `theta`, forcing `f` held fixed over the step.
    fn douglas_step(&self, u: &[f64], f: &[f64], h: f64, theta: f64) -> Vec<f64> {
        let (nx, ny) = (self.xa.len, self.ya.len);
        let n = nx * ny;
        let mut lxu = vec![0.0; n];
        let mut lyu = vec![0.0; n];
        self.apply_lx(u, &mut lxu);
        self.apply_ly(u, &mut lyu);
        let mut y = vec![0.0; n];
        for i in 1..nx - 1 {
            for j in 0..ny {
                let p = i * ny + j;
                y[p] = u[p] + h * (lxu[p] + lyu[p] + f[p]) - theta * h * lxu[p];
            }
        }
        // x sweeps
        let dx = self.xa.step;
        let m = nx - 2;
        let (mut lo, mut di, mut up, mut rhs, mut scratch) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for j in 0..ny {
            let vx = 0.5 * self.factor.variance(self.ya.at(j));
            let (a, b, c) = (vx * (1.0 / (dx * dx) + 0.5 / dx), -2.0 * vx / (dx * dx), vx * (1.0 / (dx * dx) - 0.5 / dx));
            lo.fill(-theta * h * a);
            di.fill(1.0 - theta * h * b);
            up.fill(-theta * h * c);
            for i in 0..m {
                rhs[i] = y[(i + 1) * ny + j];
            }
            solve_tridiagonal(&lo, &di, &up, &mut rhs, &mut scratch);
            for i in 0..m {
                y[(i + 1) * ny + j] = rhs[i];
            }
        }
        // y sweeps
        let lo: Vec<f64> = self.ly.iter().map(|c| -theta * h * c.0).collect();
        let di: Vec<f64> = self.ly.iter().map(|c| 1.0 - theta * h * c.1).collect();
        let up: Vec<f64> = self.ly.iter().map(|c| -theta * h * c.2).collect();
        let mut rhs = vec![0.0; ny];
        let mut scratch = vec![0.0; ny];
        for i in 1..nx - 1 {
            for j in 0..ny {
                rhs[j] = y[i * ny + j] - theta * h * lyu[i * ny + j];
            }
            solve_tridiagonal(&lo, &di, &up, &mut rhs, &mut scratch);
            y[i * ny..(i + 1) * ny].copy_from_slice(&rhs);
        }
        y
    }

    /// Solves for `u` given the forcing `f = L1 u_prev`, marching back from
    /// maturity. The first two steps are split into four fully implicit half
    /// steps to damp the terminal-layer oscillations.
    pub fn solve(&self, forcing: &SlicedField) -> SlicedField {
        let nt = self.times.len() - 1;
        let mut out = SlicedField::zeros(self.times.clone(), self.xa, self.ya);
        let mut u = vec![0.0; self.xa.len * self.ya.len];
        for k in (0..nt).rev() {
            let h = self.times[k + 1] - self.times[k];
            let (f_new, f_old) = (&forcing.slices[k], &forcing.slices[k + 1]);
            if nt - k <= 2 {
                let mid: Vec<f64> = f_new.iter().zip(f_old).map(|(a, b)| 0.5 * (a + b)).collect();
                u = self.douglas_step(&u, &mid, 0.5 * h, 1.0);
                u = self.douglas_step(&u, f_new, 0.5 * h, 1.0);
            } else {
                let avg: Vec<f64> = f_new.iter().zip(f_old).map(|(a, b)| 0.5 * (a + b)).collect();
                u = self.douglas_step(&u, &avg, h, 0.5);
            }
            out.slices[k].copy_from_slice(&u);
        }
        out
    }

    /// Field value at `(0, x0, y0)`.
    pub fn value_at_origin(&self, u: &SlicedField) -> f64 {
        u.eval(0, self.x0, self.y0)
    }

    /// Runs the hierarchy to order `n_max`, returning `C_1..C_{n_max}` and the
    /// sup-norm profile of `L1 u_{n_max}` for the residual indicator.
    pub fn expand(&self, n_max: usize) -> Result<PdeExpansion> {
        if n_max == 0 {
            return Err(Error::Domain("expansion order must be at least 1".into()));
        }
        let mut forcing = self.baseline_forcing()?;
        let mut coeffs = Vec::with_capacity(n_max);
        for _ in 0..n_max {
            let u = self.solve(&forcing);
            coeffs.push(self.value_at_origin(&u));
            forcing = self.forcing_from(&u);
        }
        let sup_norms = (0..forcing.times.len()).map(|k| forcing.sup_norm(k)).collect();
        Ok(PdeExpansion {
            coefficients: coeffs,
            residual: ResidualProfile { times: forcing.times.clone(), sup_norms, order: n_max },
        })
    }
}

/// Sup-norm profile of `L1 u_N` over time.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualProfile {
    pub times: Vec<f64>,
    pub sup_norms: Vec<f64>,
    pub order: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeExpansion {
    /// `C_1..C_N`.
    pub coefficients: Vec<f64>,
    pub residual: ResidualProfile,
}

/// `C_n` for `n = 1..=n_max` on the forced-PDE route.
pub fn forced_pde_coefficients(
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    n_max: usize,
    grid: PdeGrid,
) -> Result<PdeExpansion> {
    ForcedPde::new(contract, market, spec, grid)?.expand(n_max)
}

/// Difference between the coefficients on `grid` and on the halved grid, a
/// conservative estimate of the discretisation error.
pub fn pde_discretization_estimate(
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    n_max: usize,
    grid: PdeGrid,
) -> Result<Vec<f64>> {
    let fine = forced_pde_coefficients(contract, market, spec, n_max, grid)?;
    let coarse = forced_pde_coefficients(contract, market, spec, n_max, grid.halved())?;
    Ok(fine.coefficients.iter().zip(&coarse.coefficients).map(|(a, b)| (a - b).abs()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientRoute {
    AnalyticBaseline,
    DuhamelMc,
    ForcedPde,
}

impl CoefficientRoute {
    pub fn label(&self) -> &'static str {
        match self {
            CoefficientRoute::AnalyticBaseline => "analytic-baseline",
            CoefficientRoute::DuhamelMc => "duhamel-mc",
            CoefficientRoute::ForcedPde => "forced-pde",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionCoefficients {
    pub values: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub routes: Vec<CoefficientRoute>,
    pub clock_digest: String,
    pub contract_digest: String,
}

impl ExpansionCoefficients {
    pub fn order(&self) -> usize {
        self.values.len() - 1
    }
}

/// Full coefficient set `C_0..C_{n_max}`: analytic baseline, `C_1` by
/// Duhamel Monte Carlo when `mc` is given (otherwise by the PDE), higher
/// orders by the forced PDE. Also returns the PDE residual profile.
pub fn expansion_coefficients(
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    n_max: usize,
    mc: Option<&McConfig>,
    grid: PdeGrid,
) -> Result<(ExpansionCoefficients, Option<ResidualProfile>)> {
    let c0 = barrier::price(contract, market, spec, &QuadratureConfig::default())?;
    let mut values = vec![c0];
    let mut ses = vec![0.0];
    let mut routes = vec![CoefficientRoute::AnalyticBaseline];
    let mut residual = None;
    if n_max >= 1 {
        let pde = forced_pde_coefficients(contract, market, spec, n_max, grid)?;
        for (n, c) in pde.coefficients.iter().enumerate() {
            match (n, mc) {
                (0, Some(cfg)) => {
                    let (c1, se) = duhamel_coefficient_1(contract, market, spec, cfg)?;
                    values.push(c1);
                    ses.push(se);
                    routes.push(CoefficientRoute::DuhamelMc);
                }
                _ => {
                    values.push(*c);
                    ses.push(0.0);
                    routes.push(CoefficientRoute::ForcedPde);
                }
            }
        }
        residual = Some(pde.residual);
    }
    Ok((
        ExpansionCoefficients {
            values,
            standard_errors: ses,
            routes,
            clock_digest: spec.digest(),
            contract_digest: contract.digest(),
        },
        residual,
    ))
}

/// Horner evaluation of `sum C_n rho^n`.
pub fn taylor_eval(coeffs: &[f64], rho: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * rho + c)
}

/// Partial sums `sum_{n<=k} C_n rho^n` for `k = 0..N`.
pub fn taylor_partial_sums(coeffs: &[f64], rho: f64) -> Vec<f64> {
    let mut p = 1.0;
    let mut s = 0.0;
    coeffs
        .iter()
        .map(|c| {
            s += c * p;
            p *= rho;
            s
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PadeApproximant {
    pub l: usize,
    pub m: usize,
    /// `a_0..a_L`.
    pub numerator: Vec<f64>,
    /// `1, b_1..b_M`.
    pub denominator: Vec<f64>,
    pub poles: Vec<Complex64>,
    /// Smallest distance from a pole to the real segment `[-1, 1]`.
    pub pole_proximity: f64,
}

impl PadeApproximant {
    pub fn eval(&self, rho: f64) -> f64 {
        taylor_eval(&self.numerator, rho) / taylor_eval(&self.denominator, rho)
    }

    /// First `n` Taylor coefficients of the rational function.
    pub fn reexpand(&self, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; n];
        for k in 0..n {
            let a = self.numerator.get(k).copied().unwrap_or(0.0);
            let s: f64 = (1..=self.m.min(k)).map(|j| self.denominator[j] * c[k - j]).sum();
            c[k] = a - s;
        }
        c
    }

    pub fn label(&self) -> String {
        format!("[{}/{}]", self.l, self.m)
    }
}

/// Distance from `z` to the real segment `[-1, 1]`.
pub fn distance_to_unit_segment(z: Complex64) -> f64 {
    let dx = (z.re.abs() - 1.0).max(0.0);
    dx.hypot(z.im)
}

/// Roots of `c_0 + c_1 z + ... + c_n z^n` from the companion matrix.
pub fn polynomial_roots(c: &[f64]) -> Vec<Complex64> {
    let mut deg = c.len() - 1;
    let scale = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    while deg > 0 && c[deg].abs() <= 1e-14 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = c[deg];
    let comp = DMatrix::from_fn(deg, deg, |i, j| {
        if i == 0 {
            -c[deg - 1 - j] / lead
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    comp.complex_eigenvalues().iter().copied().collect()
}

/// `[L/M]` Pade approximant from `C_0..C_N` (`L + M <= N`).
pub fn pade_fit(coeffs: &[f64], l: usize, m: usize) -> Result<PadeApproximant> {
    if coeffs.is_empty() || l + m > coeffs.len() - 1 {
        return Err(Error::Domain(format!("[{l}/{m}] needs {} coefficients, got {}", l + m + 1, coeffs.len())));
    }
    let c = |k: isize| if k < 0 { 0.0 } else { coeffs[k as usize] };
    let mut b = vec![1.0];
    if m > 0 {
        let a = DMatrix::from_fn(m, m, |r, j| c((l + 1 + r) as isize - (j + 1) as isize));
        let rhs = DVector::from_fn(m, |r, _| -c((l + 1 + r) as isize));
        let sv = a.clone().svd(true, true);
        let smax = sv.singular_values.max();
        let smin = sv.singular_values.min();
        if smin == 0.0 || smax / smin > 1e12 {
            return Err(Error::Degenerate(format!(
                "[{l}/{m}] system is singular or ill-conditioned (condition {:.3e}); use a lower order",
                if smin == 0.0 { f64::INFINITY } else { smax / smin }
            )));
        }
        let sol = sv.solve(&rhs, 0.0).map_err(|e| Error::Numerical(e.to_string()))?;
        b.extend(sol.iter());
    }
    let numerator: Vec<f64> = (0..=l).map(|k| (0..=m.min(k)).map(|j| b[j] * c((k - j) as isize)).sum()).collect();
    let poles = polynomial_roots(&b);
    let pole_proximity = poles.iter().map(|p| distance_to_unit_segment(*p)).fold(f64::INFINITY, f64::min);
    Ok(PadeApproximant { l, m, numerator, denominator: b, poles, pole_proximity })
}

/// `[1/1]` approximant in closed form.
pub fn pade_1_1(c0: f64, c1: f64, c2: f64, rho: f64) -> f64 {
    (c0 + rho * (c1 - c0 * c2 / c1)) / (1.0 - rho * c2 / c1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FallbackPolicy {
    pub pole_threshold: f64,
    pub lower_bound: Option<f64>,
    pub upper_bound: Option<f64>,
}

impl Default for FallbackPolicy {
    fn default() -> Self {
        Self { pole_threshold: 0.2, lower_bound: Some(0.0), upper_bound: None }
    }
}

impl FallbackPolicy {
    /// Policy for survival probabilities.
    pub fn probability() -> Self {
        Self { upper_bound: Some(1.0), ..Self::default() }
    }

    fn admits(&self, v: f64) -> bool {
        v.is_finite() && self.lower_bound.map_or(true, |lo| v >= lo) && self.upper_bound.map_or(true, |hi| v <= hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalRoute {
    Pade { l: usize, m: usize },
    Taylor { order: usize },
    TaylorClamped { order: usize },
    TaylorDegenerate,
}

impl std::fmt::Display for EvalRoute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalRoute::Pade { l, m } => write!(f, "pade-{l}-{m}"),
            EvalRoute::Taylor { order } => write!(f, "taylor-{order}"),
            EvalRoute::TaylorClamped { order } => write!(f, "taylor-{order}-clamped"),
            EvalRoute::TaylorDegenerate => write!(f, "taylor-degenerate"),
        }
    }
}

/// Candidate Pade orders from highest total degree down to `[1/1]`.
pub fn pade_ladder(n: usize) -> Vec<(usize, usize)> {
    (2..=n).rev().map(|k| (k - k / 2, k / 2)).collect()
}

/// Highest-order admissible Pade value, else the Taylor truncation.
pub fn evaluate_with_fallback(coeffs: &[f64], rho: f64, policy: &FallbackPolicy) -> (f64, EvalRoute) {
    if rho == 0.0 || coeffs.len() == 1 {
        return (coeffs[0], EvalRoute::TaylorDegenerate);
    }
    let n = coeffs.len() - 1;
    for (l, m) in pade_ladder(n) {
        let Ok(p) = pade_fit(coeffs, l, m) else { continue };
        if p.pole_proximity <= policy.pole_threshold {
            continue;
        }
        let v = p.eval(rho);
        if policy.admits(v) {
            return (v, EvalRoute::Pade { l, m });
        }
    }
    let v = taylor_eval(coeffs, rho);
    if policy.admits(v) {
        (v, EvalRoute::Taylor { order: n })
    } else {
        let lo = policy.lower_bound.unwrap_or(f64::NEG_INFINITY);
        let hi = policy.upper_bound.unwrap_or(f64::INFINITY);
        let v = if v.is_nan() { lo.max(0.0).min(hi) } else { v.clamp(lo, hi) };
        (v, EvalRoute::TaylorClamped { order: n })
    }
}

/// `|rho|^{N+1} int ||L1 u_N(s)||_inf ds` by the trapezoid rule. This is an
/// indicator, not a certified bound. Without field data it cannot be formed.
pub fn residual_error_indicator(profile: Option<&ResidualProfile>, rho: f64) -> Result<f64> {
    let p = profile.ok_or_else(|| Error::Unsupported("residual indicator needs field data for L1 u_N".into()))?;
    let integral = quad::trapezoid(&p.times, &p.sup_norms);
    Ok(rho.abs().powi(p.order as i32 + 1) * integral)
}
