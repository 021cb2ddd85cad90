//! Barrier prices under an independent clock.
//!
//! Single-barrier values are one real integral against
//! `Phi((u^2 + beta^2) / 2)`; the double-knock-out value is a sine series
//! over the Dirichlet eigenfrequencies of the corridor. All inner functions
//! work in forward units at log-forward `x` and are undiscounted.

use std::cell::RefCell;
use std::f64::consts::PI;

use crate::clock::{build_transform_cache, ClockSpec, TransformCache};
use crate::error::{Error, Result};
use crate::market::{BarrierContract, ContractKind, MarketEnv, BETA};
use crate::numerics::quad::{integrate_semi_infinite, QuadratureConfig};

/// Transform evaluator `lambda -> Phi(lambda)`.
pub type PhiFn<'a> = dyn Fn(f64) -> Result<f64> + Sync + 'a;

const NOISE_FLOOR: f64 = -1e-10;

/// Laplace argument on the quadrature line.
#[inline]
pub fn lambda_of(u: f64, beta: f64) -> f64 {
    0.5 * (u * u + beta * beta)
}

/// Integrates `f` over `[0, inf)` and surfaces the first evaluation error.
fn semi_integral<F>(f: F, osc: f64, cfg: &QuadratureConfig) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let cap = if osc > 1e-12 { PI / (2.0 * osc) } else { f64::INFINITY };
    let r = integrate_semi_infinite(
        |u| match f(u) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                0.0
            }
        },
        cap,
        cfg,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(r?.value)
}

fn clamp_noise(v: f64, what: &str) -> Result<f64> {
    if v < 0.0 {
        if v > NOISE_FLOOR {
            return Ok(0.0);
        }
        return Err(Error::Numerical(format!("{what} is negative ({v:e}) beyond quadrature noise")));
    }
    Ok(v)
}

/// Density of the terminal log-price on paths that stayed below `h`.
pub fn killed_density(x: f64, h: f64, x0: f64, beta: f64, phi: &PhiFn, cfg: &QuadratureConfig) -> Result<f64> {
    if x0 >= h || x > h {
        return Err(Error::Domain(format!("need x <= h and x0 < h (x={x}, x0={x0}, h={h})")));
    }
    if x == h {
        return Ok(0.0);
    }
    let (d, c) = (h - x0, h - x);
    let i = semi_integral(|u| Ok((u * d).sin() * (u * c).sin() * phi(lambda_of(u, beta))?), d.max(c), cfg)?;
    clamp_noise(2.0 / PI * (beta * (x - x0)).exp() * i, "killed density")
}

/// `P(X_T <= x, max X < h)`.
pub fn joint_cdf(x: f64, h: f64, x0: f64, beta: f64, phi: &PhiFn, cfg: &QuadratureConfig) -> Result<f64> {
    if x0 >= h || x > h {
        return Err(Error::Domain(format!("need x <= h and x0 < h (x={x}, x0={x0}, h={h})")));
    }
    if x == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let (d, c) = (h - x0, h - x);
    let b2 = beta * beta;
    let i = semi_integral(
        |u| {
            let (sc, cc) = (u * c).sin_cos();
            Ok((u * d).sin() * (u * cc + beta * sc) / (u * u + b2) * phi(lambda_of(u, beta))?)
        },
        d.max(c),
        cfg,
    )?;
    let v = -(beta * d - beta.abs() * d).exp_m1() + 2.0 / PI * (beta * (x - x0)).exp() * i;
    Ok(clamp_noise(v, "joint CDF")?.min(1.0))
}

/// `P(max X < h)` up to the horizon.
pub fn survival_probability(h: f64, x0: f64, beta: f64, phi: &PhiFn, cfg: &QuadratureConfig) -> Result<f64> {
    joint_cdf(h, h, x0, beta, phi, cfg)
}

/// Representation `u(x) = base(x) + int_0^inf kernel(x,u) Phi((u^2+1/4)/2) du`
/// of a single-barrier value in forward units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleBarrierKernel {
    kind: ContractKind,
    /// Log-barrier (upper for UOP, lower for DOC).
    b: f64,
    k: f64,
    strike: f64,
    barrier: f64,
}

impl SingleBarrierKernel {
    pub fn new(contract: &BarrierContract) -> Result<Self> {
        contract.validate()?;
        let (b, barrier) = match contract.kind {
            ContractKind::UpOutPut => (contract.log_upper().unwrap(), contract.upper.unwrap()),
            ContractKind::DownOutCall => (contract.log_lower().unwrap(), contract.lower.unwrap()),
            _ => return Err(Error::Unsupported("double-barrier contracts use the sine series".into())),
        };
        Ok(Self { kind: contract.kind, b, k: contract.strike.ln(), strike: contract.strike, barrier })
    }

    pub fn log_barrier(&self) -> f64 {
        self.b
    }

    /// Distance from `x` to the barrier, positive inside the domain.
    pub fn distance(&self, x: f64) -> f64 {
        match self.kind {
            ContractKind::UpOutPut => self.b - x,
            _ => x - self.b,
        }
    }

    /// Largest oscillation frequency multiplier at `x`.
    pub fn oscillation(&self, x: f64) -> f64 {
        self.distance(x).abs().max((self.b - self.k).abs())
    }

    /// `(base, d base / dx)`.
    pub fn base(&self, x: f64) -> (f64, f64) {
        match self.kind {
            ContractKind::UpOutPut => {
                let e = (x - self.b).exp();
                (self.strike * (1.0 - e), -self.strike * e)
            }
            _ => {
                let e = x.exp();
                (e - self.barrier, e)
            }
        }
    }

    /// `(kernel, d kernel / dx)` at frequency `u`. `smooth` multiplies the
    /// strike factor by `sinc(u smooth / 2)`, which averages the log-strike
    /// over a band of width `smooth`.
    pub fn kernel(&self, x: f64, u: f64, smooth: f64) -> (f64, f64) {
        let den = u * u + 0.25;
        let dist = self.distance(x);
        let (s, c) = (u * dist).sin_cos();
        // d dist / dx
        let dd = if self.kind == ContractKind::UpOutPut { -1.0 } else { 1.0 };
        let strike_inside = match self.kind {
            ContractKind::UpOutPut => self.k <= self.b,
            _ => self.k >= self.b,
        };
        if strike_inside {
            let mut sk = (u * (self.b - self.k).abs()).sin();
            if smooth > 0.0 {
                sk *= sinc(0.5 * u * smooth);
            }
            let pre = -2.0 / PI * self.strike.sqrt() * sk / den;
            let ex = (0.5 * x).exp();
            (pre * ex * s, pre * ex * (0.5 * s + dd * u * c))
        } else {
            // K - H for an up-barrier put, L - K for a down-barrier call; both positive here.
            let pre = (self.strike - self.barrier).abs() * 2.0 / PI * u / den;
            let ex = (0.5 * (x - self.b)).exp();
            (pre * ex * s, pre * ex * (0.5 * s + dd * u * c))
        }
    }

    /// Undiscounted value at log-forward `x`.
    pub fn value(&self, x: f64, phi: &PhiFn, cfg: &QuadratureConfig) -> Result<f64> {
        if self.distance(x) <= 0.0 {
            return Ok(0.0);
        }
        let i = semi_integral(|u| Ok(self.kernel(x, u, 0.0).0 * phi(lambda_of(u, BETA))?), self.oscillation(x), cfg)?;
        clamp_noise(self.base(x).0 + i, "barrier value")
    }
}

#[inline]
pub fn sinc(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        1.0 - z * z / 6.0
    } else {
        z.sin() / z
    }
}

/// `lambda -> Phi_T(lambda)` for a clock specification.
pub fn spec_phi(spec: &ClockSpec, t: f64) -> impl Fn(f64) -> Result<f64> + Sync + '_ {
    move |lambda| spec.phi(t, lambda)
}

fn check_kind(contract: &BarrierContract, kind: ContractKind) -> Result<()> {
    if contract.kind != kind {
        return Err(Error::InvalidSpec(format!("expected a {} contract, got {}", kind.label(), contract.kind.label())));
    }
    Ok(())
}

/// Up-and-out put.
pub fn price_uop(contract: &BarrierContract, market: &MarketEnv, phi: &PhiFn, cfg: &QuadratureConfig) -> Result<f64> {
    check_kind(contract, ContractKind::UpOutPut)?;
    contract.check_geometry(market)?;
    let t = contract.maturity;
    let kern = SingleBarrierKernel::new(contract)?;
    Ok(market.discount(t) * kern.value(market.x0(t), phi, cfg)?)
}

/// Up-and-out put through `K J_{-1/2} - F0 J_{+1/2}` (share-measure change).
pub fn price_uop_decomposition(
    contract: &BarrierContract,
    market: &MarketEnv,
    phi: &PhiFn,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    check_kind(contract, ContractKind::UpOutPut)?;
    contract.check_geometry(market)?;
    let t = contract.maturity;
    let (x0, h) = (market.x0(t), contract.log_upper().unwrap());
    let m = contract.strike.ln().min(h);
    let jm = joint_cdf(m, h, x0, -0.5, phi, cfg)?;
    let jp = joint_cdf(m, h, x0, 0.5, phi, cfg)?;
    let v = contract.strike * jm - market.forward(t) * jp;
    Ok(market.discount(t) * clamp_noise(v, "UOP")?)
}

/// Down-and-out call.
pub fn price_doc(contract: &BarrierContract, market: &MarketEnv, phi: &PhiFn, cfg: &QuadratureConfig) -> Result<f64> {
    check_kind(contract, ContractKind::DownOutCall)?;
    contract.check_geometry(market)?;
    let t = contract.maturity;
    let kern = SingleBarrierKernel::new(contract)?;
    Ok(market.discount(t) * kern.value(market.x0(t), phi, cfg)?)
}

/// Down-and-out call by reflecting the path about the lower barrier, which
/// turns it into an up-barrier problem for `2l - X`.
pub fn price_doc_reflection(
    contract: &BarrierContract,
    market: &MarketEnv,
    phi: &PhiFn,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    check_kind(contract, ContractKind::DownOutCall)?;
    contract.check_geometry(market)?;
    let t = contract.maturity;
    let (x0, l) = (market.x0(t), contract.log_lower().unwrap());
    let start = 2.0 * l - x0;
    let m = (2.0 * l - contract.strike.ln()).min(l);
    // Under the share measure the reflected path has drift -1/2, under the
    // forward measure +1/2.
    let share = joint_cdf(m, l, start, -0.5, phi, cfg)?;
    let fwd = joint_cdf(m, l, start, 0.5, phi, cfg)?;
    let v = market.forward(t) * share - contract.strike * fwd;
    Ok(market.discount(t) * clamp_noise(v, "DOC")?)
}

#[inline]
fn antiderivative(alpha: f64, omega: f64, l: f64, x: f64) -> f64 {
    let (s, c) = (omega * (x - l)).sin_cos();
    (alpha * x).exp() / (alpha * alpha + omega * omega) * (alpha * s - omega * c)
}

/// Payoff projection coefficients `A_1..A_{n_max}` on the corridor sine basis.
pub fn dko_coefficients(contract: &BarrierContract, n_max: usize) -> Result<Vec<f64>> {
    contract.validate()?;
    if !matches!(contract.kind, ContractKind::DkoCall | ContractKind::DkoPut) {
        return Err(Error::InvalidSpec("DKO coefficients need a double-barrier contract".into()));
    }
    if n_max == 0 {
        return Err(Error::Domain("n_max must be at least 1".into()));
    }
    let (l, h) = (contract.log_lower().unwrap(), contract.log_upper().unwrap());
    let (k, strike) = (contract.strike.ln(), contract.strike);
    let a = h - l;
    let out = (1..=n_max)
        .map(|n| {
            let w = n as f64 * PI / a;
            let f = |alpha: f64, x: f64| antiderivative(alpha, w, l, x);
            let beta = BETA;
            if contract.kind == ContractKind::DkoCall {
                let c = k.max(l);
                if c >= h {
                    return 0.0;
                }
                // sin(w (h - l)) = 0 and cos = (-1)^n at the upper end.
                let sgn = if n % 2 == 0 { -1.0 } else { 1.0 };
                let fh = |alpha: f64| sgn * w * (alpha * h).exp() / (alpha * alpha + w * w);
                (fh(beta + 1.0) - f(beta + 1.0, c)) - strike * (fh(beta) - f(beta, c))
            } else {
                let d = k.min(h);
                if d <= l {
                    return 0.0;
                }
                strike * (f(beta, d) - f(beta, l)) - (f(beta + 1.0, d) - f(beta + 1.0, l))
            }
        })
        .collect();
    Ok(out)
}

/// Dirichlet Laplace grid `lambda_n = ((n pi / a)^2 + beta^2) / 2`.
pub fn dirichlet_grid(a: f64, n_max: usize) -> Vec<f64> {
    (1..=n_max)
        .map(|n| {
            let w = n as f64 * PI / a;
            lambda_of(w, BETA)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DkoPrice {
    pub price: f64,
    /// Index of the last term included.
    pub terms: usize,
}

/// Default hard cap on DKO series terms.
pub const DKO_N_MAX: usize = 2000;

/// Sums the corridor series at log-forward `x` with precomputed coefficients
/// and transform values. Returns the undiscounted value and terms used.
pub fn dko_series(x: f64, l: f64, h: f64, coeffs: &[f64], phis: &[f64], abs_tol: f64) -> Result<(f64, usize)> {
    if x <= l || x >= h {
        return Ok((0.0, 0));
    }
    let a = h - l;
    let pre = 2.0 / a * (-BETA * x).exp();
    let mut sum = 0.0;
    let mut small = 0;
    let n = coeffs.len().min(phis.len());
    for i in 0..n {
        let w = (i + 1) as f64 * PI / a;
        let term = pre * (w * (x - l)).sin() * coeffs[i] * phis[i];
        sum += term;
        if term.abs() < abs_tol * sum.abs().max(1.0) {
            small += 1;
            if small >= 3 {
                return Ok((sum, i + 1));
            }
        } else {
            small = 0;
        }
    }
    Err(Error::Convergence { detail: format!("DKO series not settled after {n} terms"), last: vec![sum] })
}

/// Double-knock-out price from a transform cache on the Dirichlet grid.
pub fn price_dko(contract: &BarrierContract, market: &MarketEnv, cache: &TransformCache) -> Result<DkoPrice> {
    price_dko_tol(contract, market, cache, QuadratureConfig::default().abs_tol)
}

pub fn price_dko_tol(contract: &BarrierContract, market: &MarketEnv, cache: &TransformCache, abs_tol: f64) -> Result<DkoPrice> {
    if !matches!(contract.kind, ContractKind::DkoCall | ContractKind::DkoPut) {
        return Err(Error::InvalidSpec(format!("expected a DKO contract, got {}", contract.kind.label())));
    }
    contract.validate()?;
    market.validate()?;
    let t = contract.maturity;
    let (l, h) = (contract.log_lower().unwrap(), contract.log_upper().unwrap());
    let x0 = market.x0(t);
    if x0 < l || x0 > h {
        return Err(Error::Geometry(format!("forward {} lies outside the corridor", market.forward(t))));
    }
    if x0 == l || x0 == h {
        return Ok(DkoPrice { price: 0.0, terms: 0 });
    }
    if cache.key.horizon != t || cache.key.t != 0.0 {
        return Err(Error::InvalidSpec("transform cache horizon does not match the contract".into()));
    }
    let expect = dirichlet_grid(h - l, cache.len());
    if expect.iter().zip(&cache.grid).any(|(a, b)| (a - b).abs() > 1e-12 * a) {
        return Err(Error::InvalidSpec("transform cache grid is not the Dirichlet grid of this corridor".into()));
    }
    let coeffs = dko_coefficients(contract, cache.len())?;
    if coeffs.iter().all(|&c| c == 0.0) {
        return Ok(DkoPrice { price: 0.0, terms: 0 });
    }
    let (v, n) = dko_series(x0, l, h, &coeffs, &cache.values(), abs_tol)?;
    Ok(DkoPrice { price: market.discount(t) * clamp_noise(v, "DKO")?, terms: n })
}

/// Double-knock-out price, growing the transform table until the series settles.
pub fn price_dko_spec(contract: &BarrierContract, market: &MarketEnv, spec: &ClockSpec) -> Result<DkoPrice> {
    contract.validate()?;
    let (l, h) = match (contract.log_lower(), contract.log_upper()) {
        (Some(l), Some(h)) => (l, h),
        _ => return Err(Error::InvalidSpec("DKO requires both barriers".into())),
    };
    let mut n = 64;
    loop {
        let grid = dirichlet_grid(h - l, n);
        let cache = build_transform_cache(spec, 0.0, contract.maturity, &grid, None)?;
        match price_dko(contract, market, &cache) {
            Err(Error::Convergence { .. }) if n < DKO_N_MAX => n = (2 * n).min(DKO_N_MAX),
            other => return other,
        }
    }
}

/// Prices any supported contract from a clock specification.
pub fn price(contract: &BarrierContract, market: &MarketEnv, spec: &ClockSpec, cfg: &QuadratureConfig) -> Result<f64> {
    spec.validate()?;
    let phi = spec_phi(spec, contract.maturity);
    match contract.kind {
        ContractKind::UpOutPut => price_uop(contract, market, &phi, cfg),
        ContractKind::DownOutCall => price_doc(contract, market, &phi, cfg),
        ContractKind::DkoCall | ContractKind::DkoPut => price_dko_spec(contract, market, spec).map(|p| p.price),
    }
}
