//! Vanilla pricing from the clock transform: characteristic function, COS
//! expansion, Black implied volatility and variance-swap strikes.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::clock::ClockSpec;
use crate::error::{Error, Result};
use crate::market::{MarketEnv, BETA};
use crate::numerics::optim::brent_root;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuoteValue {
    Price(f64),
    Vol(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VanillaQuote {
    pub maturity: f64,
    pub strike: f64,
    pub kind: OptionKind,
    pub value: QuoteValue,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl VanillaQuote {
    pub fn validate(&self) -> Result<()> {
        if !(self.maturity > 0.0 && self.strike > 0.0) {
            return Err(Error::InvalidSpec("quote maturity and strike must be positive".into()));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::InvalidSpec("quote weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// `E[exp(i u X_T)]` for complex `u` in the strip of analyticity.
pub fn char_fn_complex(spec: &ClockSpec, market: &MarketEnv, t: f64, u: Complex64) -> Result<Complex64> {
    let x0 = market.x0(t);
    let i = Complex64::new(0.0, 1.0);
    let z = u * u * 0.5 - i * u * BETA;
    let lp = spec.log_phi_complex(t, z)?;
    Ok((i * u * x0 + lp).exp())
}

/// `E[exp(i u X_T)] = exp(i u x0) Phi_T(u^2/2 - i beta u)`.
pub fn char_fn(spec: &ClockSpec, market: &MarketEnv, t: f64, u: f64) -> Result<Complex64> {
    char_fn_complex(spec, market, t, Complex64::new(u, 0.0))
}

/// First two cumulants of `X_T` from central differences of `log Phi` at 0.
pub fn cumulants(spec: &ClockSpec, market: &MarketEnv, t: f64) -> Result<(f64, f64)> {
    let h = 1e-5;
    let f = |l: f64| spec.log_phi_complex(t, Complex64::new(l, 0.0)).map(|z| z.re);
    let (fp, fm) = (f(h)?, f(-h)?);
    let mean_clock = -(fp - fm) / (2.0 * h);
    let var_clock = ((fp + fm) / (h * h)).max(0.0);
    let c1 = market.x0(t) + BETA * mean_clock;
    let c2 = mean_clock + BETA * BETA * var_clock;
    Ok((c1, c2))
}

/// Characteristic-function samples on a COS grid, reusable across strikes.
#[derive(Debug, Clone)]
pub struct CosTable {
    pub a: f64,
    pub b: f64,
    pub maturity: f64,
    pub discount: f64,
    pub forward: f64,
    /// `Re[phi(k pi/(b-a)) exp(-i k pi a/(b-a))]` for k = 0..N-1, first term halved.
    pub weights: Vec<f64>,
}

impl CosTable {
    pub fn new(spec: &ClockSpec, market: &MarketEnv, t: f64, n: usize) -> Result<Self> {
        let (c1, c2) = cumulants(spec, market, t)?;
        let half = 12.0 * c2.sqrt();
        let (a, b) = (c1 - half, c1 + half);
        let mut weights = Vec::with_capacity(n);
        for k in 0..n {
            let w = k as f64 * PI / (b - a);
            let cf = if k == 0 { Complex64::new(1.0, 0.0) } else { char_fn(spec, market, t, w)? };
            let v = (cf * Complex64::new(0.0, -w * a).exp()).re;
            weights.push(if k == 0 { 0.5 * v } else { v });
        }
        Ok(Self { a, b, maturity: t, discount: market.discount(t), forward: market.forward(t), weights })
    }

    /// Put price by COS; calls follow from parity.
    pub fn put(&self, strike: f64) -> f64 {
        let (a, b) = (self.a, self.b);
        let k = strike.ln();
        if k <= a {
            return 0.0;
        }
        let d = k.min(b);
        let bma = b - a;
        let mut sum = 0.0;
        for (j, w) in self.weights.iter().enumerate() {
            let om = j as f64 * PI / bma;
            // chi = int_a^d e^y cos(om (y-a)) dy, psi = int_a^d cos(om (y-a)) dy
            let (s, c) = (om * (d - a)).sin_cos();
            let chi = (d.exp() * (c + om * s) - a.exp()) / (1.0 + om * om);
            let psi = if j == 0 { d - a } else { s / om };
            sum += w * 2.0 / bma * (strike * psi - chi);
        }
        (self.discount * sum).max(0.0)
    }

    pub fn price(&self, strike: f64, kind: OptionKind) -> f64 {
        let p = self.put(strike);
        match kind {
            OptionKind::Put => p,
            OptionKind::Call => (p + self.discount * (self.forward - strike)).max(0.0),
        }
    }
}

pub const COS_N_DEFAULT: usize = 512;
const COS_N_CAP: usize = 1 << 14;

/// COS price of a vanilla, doubling the number of terms until two successive
/// prices agree to 1e-8.
pub fn cos_vanilla_price(spec: &ClockSpec, market: &MarketEnv, quote: &VanillaQuote) -> Result<f64> {
    quote.validate()?;
    cos_price(spec, market, quote.maturity, quote.strike, quote.kind)
}

pub fn cos_price(spec: &ClockSpec, market: &MarketEnv, t: f64, strike: f64, kind: OptionKind) -> Result<f64> {
    let tables = stable_table(spec, market, t, &[strike])?;
    Ok(tables.price(strike, kind))
}

/// Builds a COS table whose prices at `strikes` are stable under doubling.
pub fn stable_table(spec: &ClockSpec, market: &MarketEnv, t: f64, strikes: &[f64]) -> Result<CosTable> {
    let mut n = COS_N_DEFAULT;
    let mut prev = CosTable::new(spec, market, t, n)?;
    loop {
        let next = CosTable::new(spec, market, t, 2 * n)?;
        let stable = strikes.iter().all(|&k| (next.put(k) - prev.put(k)).abs() <= 1e-8);
        if stable {
            return Ok(prev);
        }
        n *= 2;
        if n >= COS_N_CAP {
            return Err(Error::Convergence {
                detail: format!("COS prices not stable at N={n}"),
                last: strikes.iter().map(|&k| next.put(k)).collect(),
            });
        }
        prev = next;
    }
}

fn norm_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

/// Black price with total variance `w = sigma^2 T`.
pub fn black_price(forward: f64, strike: f64, total_var: f64, discount: f64, kind: OptionKind) -> f64 {
    if total_var <= 0.0 {
        let intrinsic = match kind {
            OptionKind::Call => (forward - strike).max(0.0),
            OptionKind::Put => (strike - forward).max(0.0),
        };
        return discount * intrinsic;
    }
    let s = total_var.sqrt();
    let d1 = ((forward / strike).ln() + 0.5 * total_var) / s;
    let d2 = d1 - s;
    match kind {
        OptionKind::Call => discount * (forward * norm_cdf(d1) - strike * norm_cdf(d2)),
        OptionKind::Put => discount * (strike * norm_cdf(-d2) - forward * norm_cdf(-d1)),
    }
}

pub fn black_vega(forward: f64, strike: f64, vol: f64, t: f64, discount: f64) -> f64 {
    let s = vol * t.sqrt();
    if s <= 0.0 {
        return 0.0;
    }
    let d1 = ((forward / strike).ln() + 0.5 * s * s) / s;
    discount * forward * (-0.5 * d1 * d1).exp() / (2.0 * PI).sqrt() * t.sqrt()
}

/// Black implied volatility: Newton iterations with a Brent fallback.
pub fn implied_vol(price: f64, market: &MarketEnv, maturity: f64, strike: f64, kind: OptionKind) -> Result<f64> {
    let (f, df) = (market.forward(maturity), market.discount(maturity));
    let intrinsic = black_price(f, strike, 0.0, df, kind);
    let upper = match kind {
        OptionKind::Call => df * f,
        OptionKind::Put => df * strike,
    };
    if !(price > intrinsic && price < upper) {
        return Err(Error::Domain(format!(
            "price {price} outside the no-arbitrage band ({intrinsic}, {upper})"
        )));
    }
    let g = |v: f64| black_price(f, strike, v * v * maturity, df, kind) - price;
    let mut v = (2.0 * PI / maturity).sqrt() * price / (df * f).max(1e-300);
    v = v.clamp(1e-3, 3.0);
    for _ in 0..50 {
        let diff = g(v);
        let vega = black_vega(f, strike, v, maturity, df);
        if vega < 1e-14 {
            break;
        }
        let step = diff / vega;
        let next = v - step;
        if !(next > 0.0 && next < 10.0) {
            break;
        }
        v = next;
        if step.abs() < 1e-12 {
            return Ok(v);
        }
    }
    let mut hi = 1.0;
    while g(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::Numerical("implied volatility above 1000".into()));
        }
    }
    brent_root(g, 1e-8, hi, 1e-12, 200)
}

/// Annualized variance-swap strike `(1/T) E[Gamma_T]`.
pub fn variance_swap_strike(spec: &ClockSpec, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("maturity must be positive, got {t}")));
    }
    spec.validate()?;
    Ok(spec.expected_clock(t) / t)
}
