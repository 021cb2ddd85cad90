//! Staged calibration: initializers from variance swaps and ATM quotes, a
//! weighted least-squares objective over vanilla and barrier quotes, and the
//! vanilla -> barrier -> leverage -> joint refinement pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::barrier;
use crate::clock::{CirClock, ClockSpec, MarkovSwitchingClock, SquaredOuClock, TwoFactorCirClock};
use crate::error::{Error, Result};
use crate::leverage::{evaluate_with_fallback, forced_pde_coefficients, residual_error_indicator, EvalRoute, FallbackPolicy, PdeGrid};
use crate::market::{BarrierContract, MarketEnv};
use crate::numerics::linalg::nnls_small;
use crate::numerics::optim::{bisect, brent_min, golden_section, powell, PowellConfig};
use crate::numerics::quad::QuadratureConfig;
use crate::vanilla::{implied_vol, CosTable, OptionKind, QuoteValue, VanillaQuote, COS_N_DEFAULT};

/// Continuity-correction constant for discretely monitored barriers.
pub const BGK_BETA: f64 = 0.5826;

/// Largest correlation magnitude reached by the fits.
pub const RHO_CAP: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierQuote {
    pub contract: BarrierContract,
    pub price: f64,
    #[serde(default = "one")]
    pub weight: f64,
    /// Monitoring interval in years for discretely monitored quotes.
    #[serde(default)]
    pub monitoring_dt: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarSwapQuote {
    pub maturity: f64,
    /// Annualized variance strike.
    pub strike: f64,
}

/// VIX-squared style proxy: `value = scale * E[Gamma_{T,T+window}] / window`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VixProxy {
    pub maturity: f64,
    pub value: f64,
    pub window: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationDataset {
    pub market: MarketEnv,
    #[serde(default)]
    pub vanillas: Vec<VanillaQuote>,
    #[serde(default)]
    pub barriers: Vec<BarrierQuote>,
    #[serde(default)]
    pub varswaps: Vec<VarSwapQuote>,
    #[serde(default)]
    pub vix: Vec<VixProxy>,
    #[serde(default = "one")]
    pub vix_scale: f64,
}

impl CalibrationDataset {
    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        if self.vanillas.is_empty() {
            return Err(Error::InvalidSpec("dataset needs at least one vanilla maturity".into()));
        }
        for q in &self.vanillas {
            q.validate()?;
        }
        for b in &self.barriers {
            b.contract.validate()?;
            if !(b.weight >= 0.0) || !(b.price >= 0.0) {
                return Err(Error::InvalidSpec("barrier quotes need non-negative price and weight".into()));
            }
            if let Some(dt) = b.monitoring_dt {
                if !(dt > 0.0) {
                    return Err(Error::InvalidSpec("monitoring interval must be positive".into()));
                }
            }
        }
        for v in &self.varswaps {
            if !(v.maturity > 0.0 && v.strike > 0.0) {
                return Err(Error::InvalidSpec("variance swap maturity and strike must be positive".into()));
            }
        }
        for v in &self.vix {
            if !(v.maturity >= 0.0 && v.window > 0.0 && v.value > 0.0) {
                return Err(Error::InvalidSpec("VIX proxies need maturity >= 0, window > 0 and value > 0".into()));
            }
        }
        Ok(())
    }

    /// Distinct vanilla maturities, ascending.
    pub fn maturities(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.vanillas.iter().map(|q| q.maturity).collect();
        t.sort_by(|a, b| a.partial_cmp(b).unwrap());
        t.dedup();
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cir,
    Cir2,
    Sqou,
    Markov,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cir" => Ok(Family::Cir),
            "cir2" => Ok(Family::Cir2),
            "sqou" => Ok(Family::Sqou),
            "markov" => Ok(Family::Markov),
            other => Err(Error::InvalidSpec(format!("unknown clock family '{other}' (cir, cir2, sqou, markov)"))),
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Map between clock parameters and an unconstrained vector. Positive
/// parameters are logged, fractions go through a logistic map, and the
/// two-factor mean reversions use `kappa_s = e^g1`, `kappa_f = e^g1 + e^g2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reparam {
    pub family: Family,
    /// Bounds for the two-factor weight.
    pub w_bounds: (f64, f64),
    /// Initial distribution of the Markov chain (held fixed).
    pub markov_initial: Vec<f64>,
}

impl Reparam {
    pub fn new(family: Family) -> Self {
        Self { family, w_bounds: (0.2, 0.8), markov_initial: vec![0.5, 0.5] }
    }

    pub fn for_spec(spec: &ClockSpec, w_bounds: (f64, f64)) -> Result<Self> {
        let family = match spec {
            ClockSpec::Cir(_) => Family::Cir,
            ClockSpec::TwoFactorCir(_) => Family::Cir2,
            ClockSpec::SquaredOu(_) => Family::Sqou,
            ClockSpec::MarkovSwitching(_) => Family::Markov,
            ClockSpec::TimeDepCir(_) => return Err(Error::Unsupported("calibration of time-dependent CIR".into())),
        };
        let markov_initial = match spec {
            ClockSpec::MarkovSwitching(m) => m.initial_dist.clone(),
            _ => vec![0.5, 0.5],
        };
        Ok(Self { family, w_bounds, markov_initial })
    }

    pub fn encode(&self, spec: &ClockSpec) -> Result<Vec<f64>> {
        let pos = |name: &str, v: f64| -> Result<f64> {
            if v > 0.0 && v.is_finite() {
                Ok(v.ln())
            } else {
                Err(Error::Domain(format!("{name} must be positive to encode, got {v}")))
            }
        };
        let frac = |name: &str, v: f64| -> Result<f64> {
            if v > 0.0 && v < 1.0 {
                Ok(logit(v))
            } else {
                Err(Error::Domain(format!("{name} must lie strictly inside (0,1), got {v}")))
            }
        };
        match (self.family, spec) {
            (Family::Cir, ClockSpec::Cir(c)) => {
                Ok(vec![pos("v0", c.v0)?, pos("theta", c.theta)?, pos("kappa", c.kappa)?, pos("xi", c.xi)?])
            }
            (Family::Sqou, ClockSpec::SquaredOu(c)) => Ok(vec![pos("y0", c.y0)?, pos("alpha", c.alpha)?, pos("sigma", c.sigma)?]),
            (Family::Cir2, ClockSpec::TwoFactorCir(c)) => {
                let (lo, hi) = self.w_bounds;
                let w = c.weight;
                let v0 = w * c.fast.v0 + (1.0 - w) * c.slow.v0;
                let th = w * c.fast.theta + (1.0 - w) * c.slow.theta;
                Ok(vec![
                    pos("kappa_s", c.slow.kappa)?,
                    pos("kappa_f - kappa_s", c.fast.kappa - c.slow.kappa)?,
                    pos("total v0", v0)?,
                    pos("total theta", th)?,
                    frac("v0 fraction", w * c.fast.v0 / v0)?,
                    frac("theta fraction", w * c.fast.theta / th)?,
                    pos("xi_f", c.fast.xi)?,
                    pos("xi_s", c.slow.xi)?,
                    frac("scaled weight", (w - lo) / (hi - lo))?,
                ])
            }
            (Family::Markov, ClockSpec::MarkovSwitching(c)) => {
                let mut out = Vec::new();
                for l in &c.levels {
                    out.push(pos("level", *l)?);
                }
                for (i, row) in c.generator.iter().enumerate() {
                    for (j, q) in row.iter().enumerate() {
                        if i != j {
                            out.push(pos("switching rate", *q)?);
                        }
                    }
                }
                Ok(out)
            }
            _ => Err(Error::InvalidSpec(format!("clock family {} does not match {:?}", spec.family(), self.family))),
        }
    }

    pub fn decode(&self, p: &[f64]) -> Result<ClockSpec> {
        let need = self.dimension();
        if p.len() != need {
            return Err(Error::Dimension(format!("expected {need} parameters, got {}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite parameter".into()));
        }
        let e = |z: f64| z.exp();
        let spec = match self.family {
            Family::Cir => ClockSpec::Cir(CirClock { v0: e(p[0]), theta: e(p[1]), kappa: e(p[2]), xi: e(p[3]) }),
            Family::Sqou => ClockSpec::SquaredOu(SquaredOuClock { y0: e(p[0]), alpha: e(p[1]), sigma: e(p[2]) }),
            Family::Cir2 => {
                let ks = e(p[0]);
                let kf = ks + e(p[1]);
                let (v0, th) = (e(p[2]), e(p[3]));
                let (av, at) = (logistic(p[4]), logistic(p[5]));
                let (lo, hi) = self.w_bounds;
                let w = lo + (hi - lo) * logistic(p[8]);
                ClockSpec::TwoFactorCir(TwoFactorCirClock {
                    weight: w,
                    fast: CirClock { kappa: kf, theta: at * th / w, xi: e(p[6]), v0: av * v0 / w },
                    slow: CirClock { kappa: ks, theta: (1.0 - at) * th / (1.0 - w), xi: e(p[7]), v0: (1.0 - av) * v0 / (1.0 - w) },
                })
            }
            Family::Markov => {
                let m = self.markov_initial.len();
                let levels: Vec<f64> = p[..m].iter().map(|z| e(*z)).collect();
                let mut gen = vec![vec![0.0; m]; m];
                let mut k = m;
                for i in 0..m {
                    let mut row = 0.0;
                    for j in 0..m {
                        if i != j {
                            gen[i][j] = e(p[k]);
                            row += gen[i][j];
                            k += 1;
                        }
                    }
                    gen[i][i] = -row;
                }
                ClockSpec::MarkovSwitching(MarkovSwitchingClock { generator: gen, levels, initial_dist: self.markov_initial.clone() })
            }
        };
        Ok(spec)
    }

    pub fn dimension(&self) -> usize {
        match self.family {
            Family::Cir => 4,
            Family::Sqou => 3,
            Family::Cir2 => 9,
            Family::Markov => {
                let m = self.markov_initial.len();
                m * m
            }
        }
    }
}

/// Result of the one-factor variance-swap initializer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirSeed {
    pub v0: f64,
    pub theta: f64,
    pub kappa: f64,
    /// The curve is flat and the mean reversion is not identified.
    pub flat: bool,
}

/// `K_var(T) = theta + (v0 - theta) (1 - e^{-kappa T})/(kappa T)`.
pub fn cir_varswap_curve(v0: f64, theta: f64, kappa: f64, t: f64) -> f64 {
    let x = kappa * t;
    let f = if x < 1e-8 { 1.0 - 0.5 * x } else { -(-x).exp_m1() / x };
    theta + (v0 - theta) * f
}

/// Least-squares `(v0, theta)` for fixed `kappa`; the curve is linear in both.
fn varswap_profile(curve: &[VarSwapQuote], kappa: f64) -> (f64, f64, f64) {
    let a = DMatrix::from_fn(curve.len(), 2, |i, j| {
        let f = cir_varswap_curve(1.0, 0.0, kappa, curve[i].maturity);
        if j == 0 {
            f
        } else {
            1.0 - f
        }
    });
    let b = DVector::from_iterator(curve.len(), curve.iter().map(|q| q.strike));
    match nnls_small(&a, &b) {
        Some((x, r)) => (x[0], x[1], r),
        None => (f64::NAN, f64::NAN, f64::INFINITY),
    }
}

/// One-factor seed from a variance-swap curve: for each trial `kappa` the
/// curve is linear in `(v0, theta)`, so `kappa` is found by golden-section
/// search of the profiled error over `log kappa in [log 0.01, log 20]`.
pub fn init_cir_from_varswaps(curve: &[VarSwapQuote]) -> Result<CirSeed> {
    if curve.len() < 3 {
        return Err(Error::InvalidSpec(format!("need at least 3 variance-swap maturities, got {}", curve.len())));
    }
    let mut c = curve.to_vec();
    c.sort_by(|a, b| a.maturity.partial_cmp(&b.maturity).unwrap());
    let mean = c.iter().map(|q| q.strike).sum::<f64>() / c.len() as f64;
    if c.iter().all(|q| (q.strike - mean).abs() <= 1e-10 * mean) {
        return Ok(CirSeed { v0: mean, theta: mean, kappa: 1.0, flat: true });
    }
    let (lk, _) = golden_section(|lk| varswap_profile(&c, lk.exp()).2, 0.01_f64.ln(), 20.0_f64.ln(), 1e-10);
    let kappa = lk.exp();
    let (v0, theta, _) = varswap_profile(&c, kappa);
    if !(v0 > 0.0 && theta > 0.0) {
        return Err(Error::Domain(format!(
            "variance-swap curve implies non-positive v0 = {v0} or theta = {theta}; inspect the quotes"
        )));
    }
    Ok(CirSeed { v0, theta, kappa, flat: false })
}

/// Two-factor seed with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoFactorSeed {
    pub clock: TwoFactorCirClock,
    /// Share of the mean activity carried by the fast factor.
    pub alpha_fast: f64,
    pub error: f64,
    pub fell_back: bool,
}

fn kappa_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

/// Rows of the linear mean model. The expected activity of the two-factor
/// clock is `Theta + D_f e^{-kappa_f t} + D_s e^{-kappa_s t}` with
/// `Theta = w theta_f + (1-w) theta_s` and `D_i = w_i (v0_i - theta_i)`, so the
/// unknowns are `(Theta, D_f, D_s)`; the split of `Theta` between the factors
/// is not identified by mean data.
fn mean_rows(kf: f64, ks: f64, curve: &[VarSwapQuote], vix: &[VixProxy], scale: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = curve.len() + vix.len();
    let mut a = DMatrix::zeros(n, 3);
    let mut b = DVector::zeros(n);
    for (i, q) in curve.iter().enumerate() {
        a[(i, 0)] = 1.0;
        a[(i, 1)] = cir_varswap_curve(1.0, 0.0, kf, q.maturity);
        a[(i, 2)] = cir_varswap_curve(1.0, 0.0, ks, q.maturity);
        b[i] = q.strike;
    }
    for (r, q) in vix.iter().enumerate() {
        let i = curve.len() + r;
        // (1/D) int_T^{T+D} e^{-k s} ds
        let g = |k: f64| (-k * q.maturity).exp() * -(-k * q.window).exp_m1() / (k * q.window);
        a[(i, 0)] = scale;
        a[(i, 1)] = scale * g(kf);
        a[(i, 2)] = scale * g(ks);
        b[i] = q.value;
    }
    (a, b)
}

/// Fast share `alpha` of `Theta`: the midpoint of the range that keeps both
/// initial levels positive, or `None` when that range is empty.
fn theta_split(theta: f64, df: f64, ds: f64) -> Option<f64> {
    if !(theta > 0.0) {
        return None;
    }
    let lo = (-df / theta).max(0.0);
    let hi = (1.0 + ds / theta).min(1.0);
    (hi - lo > 1e-6).then(|| 0.5 * (lo + hi))
}

/// Two-factor seed: grid over `kappa_f in {0.5..10}`, `kappa_s in {0.05..1}`
/// with `kappa_f > kappa_s`; linear least squares for the mean curve at each
/// pair, keeping pairs that admit positive levels. The fast share of the long
/// run level is placed mid-range and the weight follows from it, clipped to
/// `w_bounds`. Vol-of-vol scales are left at `xi`. Falls back to two copies of
/// the one-factor seed when no pair is admissible.
pub fn init_two_factor_grid(
    curve: &[VarSwapQuote],
    vix: &[VixProxy],
    vix_scale: f64,
    w_bounds: (f64, f64),
    xi: f64,
) -> Result<TwoFactorSeed> {
    if curve.len() + vix.len() < 4 {
        return Err(Error::InvalidSpec("two-factor initializer needs at least 4 mean-curve targets".into()));
    }
    let (wl, wh) = w_bounds;
    if !(0.0 < wl && wl < wh && wh < 1.0) {
        return Err(Error::InvalidSpec(format!("weight bounds must satisfy 0 < lo < hi < 1, got {w_bounds:?}")));
    }
    let mut best: Option<(f64, f64, f64, DVector<f64>, f64)> = None;
    for &kf in &kappa_grid(0.5, 10.0, 0.5) {
        for &ks in &kappa_grid(0.05, 1.0, 0.05) {
            if kf <= ks {
                continue;
            }
            let (a, b) = mean_rows(kf, ks, curve, vix, vix_scale);
            let Ok(x) = a.clone().svd(true, true).solve(&b, 1e-14) else { continue };
            let Some(alpha) = theta_split(x[0], x[1], x[2]) else { continue };
            let r = (&a * &x - &b).norm_squared();
            if best.as_ref().map_or(true, |(_, _, rb, _, _)| r < *rb - 1e-24) {
                best = Some((kf, ks, r, x, alpha));
            }
        }
    }
    let Some((kf, ks, err, x, alpha_fast)) = best else {
        let seed = init_cir_from_varswaps(curve)?;
        let w = 0.5 * (wl + wh);
        let c = CirClock { kappa: seed.kappa, theta: seed.theta, xi, v0: seed.v0 };
        return Ok(TwoFactorSeed {
            clock: TwoFactorCirClock { weight: w, fast: CirClock { kappa: 2.0 * seed.kappa.max(0.5), ..c }, slow: c },
            alpha_fast: 0.5,
            error: f64::INFINITY,
            fell_back: true,
        });
    };
    let (th, df, ds) = (x[0], x[1], x[2]);
    let w = alpha_fast.clamp(wl, wh);
    let fast = CirClock { kappa: kf, theta: alpha_fast * th / w, xi, v0: (alpha_fast * th + df) / w };
    let slow = CirClock { kappa: ks, theta: (1.0 - alpha_fast) * th / (1.0 - w), xi, v0: ((1.0 - alpha_fast) * th + ds) / (1.0 - w) };
    Ok(TwoFactorSeed { clock: TwoFactorCirClock { weight: w, fast, slow }, alpha_fast, error: err, fell_back: false })
}

/// Scales every vol-of-vol parameter of the clock to `s`.
fn with_dispersion(spec: &ClockSpec, s: f64) -> Option<ClockSpec> {
    match spec {
        ClockSpec::Cir(c) => Some(ClockSpec::Cir(CirClock { xi: s, ..*c })),
        ClockSpec::TwoFactorCir(c) => Some(ClockSpec::TwoFactorCir(TwoFactorCirClock {
            fast: CirClock { xi: s, ..c.fast },
            slow: CirClock { xi: s, ..c.slow },
            ..*c
        })),
        _ => None,
    }
}

/// Fits the vol-of-vol scale so that the model ATM price at the middle
/// maturity matches the quote, by bisection on `[0.01, 3]`. Returns the
/// updated clock and whether the bracket failed (closest endpoint used).
pub fn fit_dispersion_atm(spec: &ClockSpec, market: &MarketEnv, quote: &VanillaQuote) -> Result<(ClockSpec, bool)> {
    let Some(_) = with_dispersion(spec, 0.1) else {
        return Ok((spec.clone(), false));
    };
    let target = quote_price(quote, market)?;
    let f = |s: f64| -> f64 {
        let sp = with_dispersion(spec, s).unwrap();
        match CosTable::new(&sp, market, quote.maturity, COS_N_DEFAULT) {
            Ok(t) => t.price(quote.strike, quote.kind) - target,
            Err(_) => f64::NAN,
        }
    };
    let (lo, hi) = (0.01, 3.0);
    let (flo, fhi) = (f(lo), f(hi));
    if flo.is_finite() && fhi.is_finite() && flo * fhi < 0.0 {
        let s = bisect(f, lo, hi, 1e-8, 200)?;
        Ok((with_dispersion(spec, s).unwrap(), false))
    } else {
        let s = if flo.abs() <= fhi.abs() { lo } else { hi };
        Ok((with_dispersion(spec, s).unwrap(), true))
    }
}

fn quote_price(q: &VanillaQuote, market: &MarketEnv) -> Result<f64> {
    match q.value {
        QuoteValue::Price(p) => Ok(p),
        QuoteValue::Vol(v) => Ok(crate::vanilla::black_price(
            market.forward(q.maturity),
            q.strike,
            v * v * q.maturity,
            market.discount(q.maturity),
            q.kind,
        )),
    }
}

/// Variance-swap curve of the dataset, or ATM implied variances when no
/// swaps are quoted. The flag reports the substitution.
fn effective_curve(data: &CalibrationDataset) -> Result<(Vec<VarSwapQuote>, bool)> {
    if data.varswaps.len() >= 3 {
        return Ok((data.varswaps.clone(), false));
    }
    let mut out = Vec::new();
    for t in data.maturities() {
        if let Some(q) = atm_quote(data, t) {
            let p = quote_price(q, &data.market)?;
            let v = implied_vol(p, &data.market, q.maturity, q.strike, q.kind)?;
            out.push(VarSwapQuote { maturity: t, strike: v * v });
        }
    }
    Ok((out, true))
}

fn atm_quote(data: &CalibrationDataset, t: f64) -> Option<&VanillaQuote> {
    let f = data.market.forward(t);
    data.vanillas
        .iter()
        .filter(|q| q.maturity == t)
        .min_by(|a, b| (a.strike / f).ln().abs().partial_cmp(&(b.strike / f).ln().abs()).unwrap())
}

/// Initial clock for the family, with diagnostic flags.
pub fn initialize(data: &CalibrationDataset, family: Family, w_bounds: (f64, f64)) -> Result<(ClockSpec, Vec<String>)> {
    data.validate()?;
    let mut flags = Vec::new();
    let (curve, proxied) = effective_curve(data)?;
    if proxied {
        flags.push("varswap-from-atm".to_string());
    }
    let seed = init_cir_from_varswaps(&curve)?;
    if seed.flat {
        flags.push("flat-varswap-curve".to_string());
    }
    let mats = data.maturities();
    let mid = mats[mats.len() / 2];
    let spec = match family {
        Family::Cir => ClockSpec::Cir(CirClock { v0: seed.v0, theta: seed.theta, kappa: seed.kappa, xi: 0.3 }),
        Family::Sqou => {
            let alpha = 0.5 * seed.kappa;
            ClockSpec::SquaredOu(SquaredOuClock { y0: seed.v0.sqrt(), alpha, sigma: (2.0 * alpha * seed.theta).sqrt() })
        }
        Family::Cir2 => {
            if curve.len() + data.vix.len() < 4 {
                flags.push("two-factor-underdetermined".to_string());
                let c = CirClock { kappa: seed.kappa, theta: seed.theta, xi: 0.3, v0: seed.v0 };
                let w = 0.5 * (w_bounds.0 + w_bounds.1);
                ClockSpec::TwoFactorCir(TwoFactorCirClock { weight: w, fast: CirClock { kappa: 2.0 * seed.kappa.max(0.5), ..c }, slow: c })
            } else {
                let tf = init_two_factor_grid(&curve, &data.vix, data.vix_scale, w_bounds, 0.3)?;
                if tf.fell_back {
                    flags.push("two-factor-grid-infeasible".to_string());
                }
                ClockSpec::TwoFactorCir(tf.clock)
            }
        }
        Family::Markov => {
            let (lo, hi) = (0.5 * seed.theta, 1.5 * seed.theta);
            let p_lo = ((hi - seed.v0) / (hi - lo)).clamp(0.05, 0.95);
            let q = 0.5 * seed.kappa.max(0.05);
            ClockSpec::MarkovSwitching(MarkovSwitchingClock {
                generator: vec![vec![-q, q], vec![q, -q]],
                levels: vec![lo, hi],
                initial_dist: vec![p_lo, 1.0 - p_lo],
            })
        }
    };
    let spec = match atm_quote(data, mid) {
        Some(q) => {
            let (s, failed) = fit_dispersion_atm(&spec, &data.market, q)?;
            if failed {
                flags.push("atm-dispersion-bracket-failed".to_string());
            }
            s
        }
        None => spec,
    };
    Ok((spec, flags))
}

/// Shifts discretely monitored barriers outwards by `exp(0.5826 sigma sqrt(dt))`.
pub fn bgk_adjust(contract: &BarrierContract, sigma: f64, dt: f64) -> BarrierContract {
    let s = (BGK_BETA * sigma * dt.sqrt()).exp();
    BarrierContract { upper: contract.upper.map(|h| h * s), lower: contract.lower.map(|l| l / s), ..*contract }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub instrument: String,
    pub model: f64,
    pub market: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub vanilla: f64,
    pub barrier: f64,
    pub penalty: f64,
    pub residuals: Vec<Residual>,
    pub failures: usize,
    pub routes: Vec<Option<EvalRoute>>,
}

/// Inputs of the objective besides the clock and `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveContext {
    /// Multiplier applied to every barrier-quote weight.
    pub barrier_weight: f64,
    /// Cached `C_1..C_N` per barrier quote, required when `rho != 0`.
    pub leverage: Option<Vec<Vec<f64>>>,
    pub policy: FallbackPolicy,
    /// Weight of the penalty on extreme mean-reversion speeds.
    pub regularization: f64,
    pub quad: QuadratureConfig,
}

impl Default for ObjectiveContext {
    fn default() -> Self {
        Self {
            barrier_weight: 0.25,
            leverage: None,
            policy: FallbackPolicy::default(),
            regularization: 1e-4,
            quad: QuadratureConfig { rel_tol: 1e-8, ..QuadratureConfig::default() },
        }
    }
}

/// Penalty for mean-reversion speeds outside `[0.01, 50]`.
pub fn regularization_penalty(spec: &ClockSpec) -> f64 {
    let out = |k: f64| {
        let l = k.ln();
        let (lo, hi) = (0.01_f64.ln(), 50.0_f64.ln());
        if l < lo {
            (lo - l).powi(2)
        } else if l > hi {
            (l - hi).powi(2)
        } else {
            0.0
        }
    };
    match spec {
        ClockSpec::Cir(c) => out(c.kappa),
        ClockSpec::TwoFactorCir(c) => out(c.fast.kappa) + out(c.slow.kappa),
        ClockSpec::SquaredOu(c) => out(c.alpha),
        ClockSpec::MarkovSwitching(c) => c.generator.iter().enumerate().map(|(i, r)| out(-r[i])).sum(),
        ClockSpec::TimeDepCir(c) => c.kappa.iter().map(|k| out(*k)).sum(),
    }
}

fn vanilla_label(q: &VanillaQuote) -> String {
    format!("vanilla:{}:{}:{}", q.maturity, q.strike, if q.kind == OptionKind::Call { "call" } else { "put" })
}

fn barrier_label(b: &BarrierQuote) -> String {
    let c = &b.contract;
    format!(
        "{}:{}:{}:{}:{}",
        c.kind.label(),
        c.maturity,
        c.strike,
        c.lower.map_or("-".to_string(), |v| v.to_string()),
        c.upper.map_or("-".to_string(), |v| v.to_string())
    )
}

/// Model barrier value: analytic baseline, corrected by the cached leverage
/// coefficients when `rho != 0`.
fn barrier_model(
    spec: &ClockSpec,
    market: &MarketEnv,
    b: &BarrierQuote,
    rho: f64,
    higher: Option<&Vec<f64>>,
    ctx: &ObjectiveContext,
) -> Result<(f64, Option<EvalRoute>)> {
    let c0 = barrier::price(&b.contract, market, spec, &ctx.quad)?;
    if rho == 0.0 {
        return Ok((c0, None));
    }
    let higher = higher.ok_or_else(|| Error::Unsupported("rho != 0 needs cached leverage coefficients".into()))?;
    let mut coeffs = vec![c0];
    coeffs.extend_from_slice(higher);
    let (v, r) = evaluate_with_fallback(&coeffs, rho, &ctx.policy);
    Ok((v, Some(r)))
}

/// Weighted least squares `sum w_i (Q_i^mod - Q_i)^2` over the dataset.
/// Vol quotes are compared in implied-vol space, price quotes in price space.
/// Pricing failures contribute the full quote as residual and are counted.
pub fn objective_eval(spec: &ClockSpec, data: &CalibrationDataset, rho: f64, ctx: &ObjectiveContext) -> Result<ObjectiveValue> {
    spec.validate()?;
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("rho must lie in [-1, 1], got {rho}")));
    }
    if rho != 0.0 && !data.barriers.is_empty() && ctx.leverage.as_ref().map_or(true, |l| l.len() != data.barriers.len()) {
        return Err(Error::Unsupported("rho != 0 needs one cached coefficient set per barrier quote".into()));
    }
    let market = &data.market;
    let mats = data.maturities();
    let tables: Vec<Option<CosTable>> = mats.par_iter().map(|t| CosTable::new(spec, market, *t, COS_N_DEFAULT).ok()).collect();
    let vanilla: Vec<(Residual, bool)> = data
        .vanillas
        .par_iter()
        .map(|q| {
            let idx = mats.iter().position(|t| *t == q.maturity).unwrap();
            let price = tables[idx].as_ref().map(|t| t.price(q.strike, q.kind));
            let (model, mkt, ok) = match (q.value, price) {
                (QuoteValue::Price(p), Some(m)) if m.is_finite() => (m, p, true),
                (QuoteValue::Vol(v), Some(m)) => match implied_vol(m, market, q.maturity, q.strike, q.kind) {
                    Ok(iv) => (iv, v, true),
                    Err(_) => (0.0, v, false),
                },
                (QuoteValue::Price(p), _) => (0.0, p, false),
                (QuoteValue::Vol(v), None) => (0.0, v, false),
            };
            (Residual { instrument: vanilla_label(q), model, market: mkt, weight: q.weight }, ok)
        })
        .collect();
    let barrier: Vec<(Residual, bool, Option<EvalRoute>)> = data
        .barriers
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let w = b.weight * ctx.barrier_weight;
            let higher = ctx.leverage.as_ref().map(|l| &l[i]);
            match barrier_model(spec, market, b, rho, higher, ctx) {
                Ok((m, r)) => (Residual { instrument: barrier_label(b), model: m, market: b.price, weight: w }, true, r),
                Err(_) => (Residual { instrument: barrier_label(b), model: 0.0, market: b.price, weight: w }, false, None),
            }
        })
        .collect();
    let sse = |r: &Residual| r.weight * (r.model - r.market).powi(2);
    let v_sse: f64 = vanilla.iter().map(|(r, _)| sse(r)).sum();
    let b_sse: f64 = barrier.iter().map(|(r, _, _)| sse(r)).sum();
    let failures = vanilla.iter().filter(|(_, ok)| !ok).count() + barrier.iter().filter(|(_, ok, _)| !ok).count();
    let penalty = ctx.regularization * regularization_penalty(spec);
    let routes = barrier.iter().map(|(_, _, r)| *r).collect();
    let mut residuals: Vec<Residual> = vanilla.into_iter().map(|(r, _)| r).collect();
    residuals.extend(barrier.into_iter().map(|(r, _, _)| r));
    Ok(ObjectiveValue { total: v_sse + b_sse + penalty, vanilla: v_sse, barrier: b_sse, penalty, residuals, failures, routes })
}

/// A barrier quote with its cached expansion coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedQuote {
    /// `C_0..C_N`.
    pub coeffs: Vec<f64>,
    pub quote: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoFit {
    pub rho: f64,
    pub sse: f64,
    pub routes: Vec<EvalRoute>,
    pub flags: Vec<String>,
}

/// Fits `rho in [-0.99, 0.99]` to leverage-sensitive quotes from cached
/// coefficients: a uniform scan followed by Brent refinement around the best
/// scan point.
pub fn fit_rho_cached(quotes: &[CachedQuote], policy: &FallbackPolicy) -> Result<RhoFit> {
    if quotes.is_empty() {
        return Err(Error::InvalidSpec("no leverage-sensitive quotes to fit rho".into()));
    }
    if quotes.iter().all(|q| q.weight == 0.0) {
        return Err(Error::InvalidSpec("all leverage-sensitive quotes have zero weight".into()));
    }
    let sse = |rho: f64| -> f64 {
        quotes
            .iter()
            .map(|q| {
                let (v, _) = evaluate_with_fallback(&q.coeffs, rho, policy);
                q.weight * (v - q.quote).powi(2)
            })
            .sum()
    };
    let (lo, hi) = (-RHO_CAP, RHO_CAP);
    let n = 199;
    let step = (hi - lo) / (n - 1) as f64;
    let mut best = (lo, f64::INFINITY);
    for i in 0..n {
        let r = lo + step * i as f64;
        let v = sse(r);
        if v < best.1 {
            best = (r, v);
        }
    }
    let (a, b) = ((best.0 - step).max(lo), (best.0 + step).min(hi));
    let (rho, val) = brent_min(sse, a, b, 1e-10, 200);
    let (rho, val) = if val <= best.1 { (rho, val) } else { best };
    let routes: Vec<EvalRoute> = quotes.iter().map(|q| evaluate_with_fallback(&q.coeffs, rho, policy).1).collect();
    let mut flags = Vec::new();
    let low_order = |r: &EvalRoute| match r {
        EvalRoute::Pade { l, m } => l + m <= 2,
        _ => true,
    };
    if rho != 0.0 && routes.iter().all(low_order) {
        flags.push("rho-extrapolation-risk".to_string());
    }
    Ok(RhoFit { rho, sse: val, routes, flags })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub family: Family,
    #[serde(default = "all_stages")]
    pub stages: Vec<u8>,
    #[serde(default = "quarter")]
    pub barrier_weight: f64,
    #[serde(default = "three")]
    pub expansion_order: usize,
    #[serde(default = "calib_grid")]
    pub pde_grid: PdeGrid,
    #[serde(default = "stage_iter")]
    pub stage_max_iter: usize,
    #[serde(default = "joint_iter")]
    pub joint_max_iter: usize,
    #[serde(default = "w_bounds")]
    pub w_bounds: (f64, f64),
    #[serde(default)]
    pub policy: FallbackPolicy,
    /// Number of leverage-coefficient refreshes around stages 3 and 4.
    #[serde(default = "refresh")]
    pub refresh_cycles: usize,
    /// Residual-indicator level, relative to the quote, above which a flag is raised.
    #[serde(default = "indicator_tol")]
    pub indicator_tolerance: f64,
}

fn all_stages() -> Vec<u8> {
    vec![1, 2, 3, 4]
}
fn quarter() -> f64 {
    0.25
}
fn three() -> usize {
    3
}
fn calib_grid() -> PdeGrid {
    PdeGrid { nx: 100, ny: 40, nt: 100 }
}
fn stage_iter() -> usize {
    60
}
fn joint_iter() -> usize {
    20
}
fn w_bounds() -> (f64, f64) {
    (0.2, 0.8)
}
fn refresh() -> usize {
    5
}
fn indicator_tol() -> f64 {
    0.01
}

impl CalibrationConfig {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            stages: all_stages(),
            barrier_weight: quarter(),
            expansion_order: three(),
            pde_grid: calib_grid(),
            stage_max_iter: stage_iter(),
            joint_max_iter: joint_iter(),
            w_bounds: w_bounds(),
            policy: FallbackPolicy::default(),
            refresh_cycles: refresh(),
            indicator_tolerance: indicator_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.iter().any(|s| !(1..=4).contains(s)) {
            return Err(Error::InvalidSpec(format!("stages must be drawn from 1..4, got {:?}", self.stages)));
        }
        if !(self.barrier_weight >= 0.0) {
            return Err(Error::InvalidSpec("barrier weight must be non-negative".into()));
        }
        if self.expansion_order == 0 {
            return Err(Error::InvalidSpec("expansion order must be at least 1".into()));
        }
        self.pde_grid.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub objective: f64,
    pub accepted: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub spec: ClockSpec,
    pub rho: f64,
    /// Full objective after initialization and after each stage.
    pub stages: Vec<StageRecord>,
    pub residuals: Vec<Residual>,
    pub flags: Vec<String>,
    pub objective: f64,
    /// Cached `C_1..C_N` per barrier quote from the leverage stage.
    pub leverage: Option<Vec<Vec<f64>>>,
}

impl CalibrationResult {
    /// Objectives of the accepted stages, in order.
    pub fn accepted_objectives(&self) -> Vec<f64> {
        self.stages.iter().filter(|s| s.accepted).map(|s| s.objective).collect()
    }

    /// Every accepted stage did not increase the objective it was judged on.
    pub fn is_monotone(&self) -> bool {
        self.stages.windows(2).all(|w| !w[1].accepted || w[1].objective <= w[0].objective)
    }
}

/// Applies the continuity correction to discretely monitored barrier quotes,
/// using the ATM implied vol (or variance-swap level) nearest the maturity.
fn preprocess(data: &CalibrationDataset, flags: &mut Vec<String>) -> Result<CalibrationDataset> {
    let mut out = data.clone();
    for b in out.barriers.iter_mut() {
        if let Some(dt) = b.monitoring_dt {
            let t = b.contract.maturity;
            let mats = data.maturities();
            let near = mats.iter().copied().min_by(|a, c| (a - t).abs().partial_cmp(&(c - t).abs()).unwrap()).unwrap();
            let sigma = match atm_quote(data, near) {
                Some(q) => implied_vol(quote_price(q, &data.market)?, &data.market, q.maturity, q.strike, q.kind)?,
                None => 0.2,
            };
            b.contract = bgk_adjust(&b.contract, sigma, dt);
            b.monitoring_dt = None;
            flags.push(format!("bgk-shift:{}", barrier_label(b)));
        }
    }
    Ok(out)
}

struct Stager<'a> {
    data: &'a CalibrationDataset,
    records: Vec<StageRecord>,
    best: f64,
}

impl Stager<'_> {
    fn full(&self, spec: &ClockSpec, rho: f64, ctx: &ObjectiveContext) -> f64 {
        objective_eval(spec, self.data, rho, ctx).map_or(f64::INFINITY, |o| o.total)
    }

    /// Records a stage, accepting it when the full objective did not increase.
    fn judge(&mut self, stage: u8, value: f64, note: &str) -> bool {
        let ok = value.is_finite() && value <= self.best;
        self.records.push(StageRecord { stage, objective: value, accepted: ok, note: note.to_string() });
        if ok {
            self.best = value;
        }
        ok
    }
}

/// Runs the staged workflow: (1) vanilla-only fit at `rho = 0`, (2) refit with
/// barrier quotes at `rho = 0`, (3) leverage coefficients cached at the
/// current clock and `rho` fitted from them, (4) short joint polish over
/// clock and `rho` with the exact baseline and cached higher orders.
pub fn run_stage_pipeline(data: &CalibrationDataset, cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    data.validate()?;
    cfg.validate()?;
    let mut flags = Vec::new();
    let data = preprocess(data, &mut flags)?;
    let (seed, init_flags) = initialize(&data, cfg.family, cfg.w_bounds)?;
    flags.extend(init_flags);
    run_stage_pipeline_from(&data, cfg, seed, flags)
}

/// The staged workflow from a given initial clock.
pub fn run_stage_pipeline_from(
    data: &CalibrationDataset,
    cfg: &CalibrationConfig,
    seed: ClockSpec,
    mut flags: Vec<String>,
) -> Result<CalibrationResult> {
    let rep = Reparam::for_spec(&seed, cfg.w_bounds)?;
    let mut ctx = ObjectiveContext { barrier_weight: cfg.barrier_weight, policy: cfg.policy, ..ObjectiveContext::default() };
    let has_barriers = data.barriers.iter().any(|b| b.weight * cfg.barrier_weight > 0.0);
    let mut st = Stager { data, records: Vec::new(), best: f64::INFINITY };
    let mut spec = seed;
    let mut rho = 0.0;
    let start = st.full(&spec, 0.0, &ctx);
    st.judge(0, start, "initializer");

    let fit_clock = |ctx: &ObjectiveContext, spec: &ClockSpec, rho: f64, with_barriers: bool, iters: usize| -> Result<ClockSpec> {
        let local = ObjectiveContext { barrier_weight: if with_barriers { ctx.barrier_weight } else { 0.0 }, ..ctx.clone() };
        let x0 = rep.encode(spec)?;
        let res = powell(
            |p| match rep.decode(p) {
                Ok(s) if s.validate().is_ok() => objective_eval(&s, data, rho, &local).map_or(1e10, |o| o.total),
                _ => 1e10,
            },
            &x0,
            &PowellConfig { max_iter: iters, ftol: 1e-12, ..PowellConfig::default() },
        );
        rep.decode(&res.x)
    };

    if cfg.stages.contains(&1) {
        let cand = fit_clock(&ctx, &spec, 0.0, false, cfg.stage_max_iter)?;
        let v = st.full(&cand, 0.0, &ctx);
        if st.judge(1, v, "vanilla fit") {
            spec = cand;
        } else {
            flags.push("stage-1-rejected".to_string());
        }
    }
    if cfg.stages.contains(&2) {
        if has_barriers {
            let cand = fit_clock(&ctx, &spec, 0.0, true, cfg.stage_max_iter)?;
            let v = st.full(&cand, 0.0, &ctx);
            if st.judge(2, v, "barrier refinement at rho = 0") {
                spec = cand;
            } else {
                flags.push("stage-2-rejected".to_string());
            }
        } else {
            st.records.push(StageRecord { stage: 2, objective: st.best, accepted: false, note: "no barrier quotes".into() });
        }
    }
    let leverage_ok = crate::leverage::Factor::from_spec(&spec).is_ok();
    let leverage_stages = cfg.stages.contains(&3) || cfg.stages.contains(&4);
    if leverage_stages && !has_barriers {
        st.records.push(StageRecord { stage: 3, objective: st.best, accepted: false, note: "no barrier quotes".into() });
    } else if leverage_stages && !leverage_ok {
        flags.push(format!("leverage-unsupported:{}", spec.family()));
        st.records.push(StageRecord { stage: 3, objective: st.best, accepted: false, note: "leverage unsupported".into() });
    } else if leverage_stages {
        let mut profiles = Vec::new();
        for cycle in 0..cfg.refresh_cycles.max(1) {
            // Coefficients are cached at the current clock; later cycles
            // refresh them after the joint polish has moved it.
            let mut cached = Vec::new();
            profiles.clear();
            for b in &data.barriers {
                let e = forced_pde_coefficients(&b.contract, &data.market, &spec, cfg.expansion_order, cfg.pde_grid)?;
                cached.push(e.coefficients);
                profiles.push(e.residual);
            }
            let trial = ObjectiveContext { leverage: Some(cached.clone()), ..ctx.clone() };
            if cycle > 0 {
                let v = st.full(&spec, rho, &trial);
                st.records.push(StageRecord { stage: 3, objective: v, accepted: false, note: format!("coefficients refreshed (cycle {cycle})") });
                st.best = v;
            }
            ctx = trial;
            if cfg.stages.contains(&3) {
                let quotes: Vec<CachedQuote> = data
                    .barriers
                    .iter()
                    .zip(&cached)
                    .map(|(b, hc)| -> Result<CachedQuote> {
                        let c0 = barrier::price(&b.contract, &data.market, &spec, &ctx.quad)?;
                        let mut coeffs = vec![c0];
                        coeffs.extend_from_slice(hc);
                        Ok(CachedQuote { coeffs, quote: b.price, weight: b.weight * cfg.barrier_weight })
                    })
                    .collect::<Result<_>>()?;
                let fit = fit_rho_cached(&quotes, &cfg.policy)?;
                let v = st.full(&spec, fit.rho, &ctx);
                if st.judge(3, v, "rho from cached coefficients") {
                    rho = fit.rho;
                    if cycle + 1 == cfg.refresh_cycles.max(1) {
                        flags.extend(fit.flags.iter().cloned());
                    }
                } else {
                    flags.push("stage-3-rejected".to_string());
                }
            }
            if cfg.stages.contains(&4) {
                let mut x0 = rep.encode(&spec)?;
                x0.push((rho / RHO_CAP).clamp(-0.999, 0.999).atanh());
                let n = x0.len();
                let obj = |p: &[f64]| match rep.decode(&p[..n - 1]) {
                    Ok(s) if s.validate().is_ok() => {
                        objective_eval(&s, data, RHO_CAP * p[n - 1].tanh(), &ctx).map_or(1e10, |o| o.total)
                    }
                    _ => 1e10,
                };
                let res = powell(obj, &x0, &PowellConfig { max_iter: cfg.joint_max_iter, ftol: 1e-12, ..PowellConfig::default() });
                let cand = rep.decode(&res.x[..n - 1])?;
                let cr = RHO_CAP * res.x[n - 1].tanh();
                let v = st.full(&cand, cr, &ctx);
                if st.judge(4, v, "joint polish") {
                    spec = cand;
                    rho = cr;
                } else {
                    flags.push("stage-4-rejected".to_string());
                }
            }
        }
        for (b, p) in data.barriers.iter().zip(&profiles) {
            let ind = residual_error_indicator(Some(p), rho)?;
            if ind > cfg.indicator_tolerance * b.price.max(1e-12) {
                flags.push(format!("indicator-exceedance:{}", barrier_label(b)));
            }
        }
    }
    let fin = objective_eval(&spec, data, rho, &ctx)?;
    flags.extend(spec.warnings().into_iter().map(|w| format!("warning:{w}")));
    for (r, b) in fin.routes.iter().zip(&data.barriers) {
        if let Some(route @ (EvalRoute::Taylor { .. } | EvalRoute::TaylorClamped { .. })) = r {
            flags.push(format!("pade-fallback:{route}:{}", barrier_label(b)));
        }
    }
    if fin.failures > 0 {
        flags.push(format!("pricing-failures:{}", fin.failures));
    }
    Ok(CalibrationResult {
        spec,
        rho,
        stages: st.records,
        residuals: fin.residuals,
        flags,
        objective: fin.total,
        leverage: ctx.leverage,
    })
}

/// Dataset generated by the model itself: implied-vol quotes on the given
/// strikes, variance swaps at the vanilla maturities, and barrier prices from
/// the baseline plus the leverage expansion at `rho`.
pub fn synthetic_dataset(
    spec: &ClockSpec,
    market: &MarketEnv,
    rho: f64,
    vanilla_grid: &[(f64, Vec<f64>)],
    barriers: &[BarrierContract],
    expansion_order: usize,
    grid: PdeGrid,
) -> Result<CalibrationDataset> {
    let mut vanillas = Vec::new();
    let mut varswaps = Vec::new();
    for (t, strikes) in vanilla_grid {
        let table = CosTable::new(spec, market, *t, COS_N_DEFAULT)?;
        for k in strikes {
            let kind = if *k >= market.forward(*t) { OptionKind::Call } else { OptionKind::Put };
            let iv = implied_vol(table.price(*k, kind), market, *t, *k, kind)?;
            vanillas.push(VanillaQuote { maturity: *t, strike: *k, kind, value: QuoteValue::Vol(iv), weight: 1.0 });
        }
        varswaps.push(VarSwapQuote { maturity: *t, strike: crate::vanilla::variance_swap_strike(spec, *t)? });
    }
    let quad = ObjectiveContext::default().quad;
    let mut quotes = Vec::new();
    for c in barriers {
        let c0 = barrier::price(c, market, spec, &quad)?;
        let price = if rho == 0.0 {
            c0
        } else {
            let mut coeffs = vec![c0];
            coeffs.extend(forced_pde_coefficients(c, market, spec, expansion_order, grid)?.coefficients);
            evaluate_with_fallback(&coeffs, rho, &FallbackPolicy::default()).0
        };
        quotes.push(BarrierQuote { contract: *c, price, weight: 1.0, monitoring_dt: None });
    }
    Ok(CalibrationDataset { market: *market, vanillas, barriers: quotes, varswaps, vix: Vec::new(), vix_scale: 1.0 })
}
