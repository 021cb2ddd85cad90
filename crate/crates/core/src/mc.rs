//! Monte Carlo engine: variance-factor paths, clock accumulation, the
//! time-changed log-forward, and Brownian-bridge corrected barrier monitoring.
//!
//! Every path draws from its own ChaCha stream keyed by `(seed, path)`, and
//! blocks of paths are merged in block order, so estimates do not depend on
//! the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clock::{ClockSpec, MarkovSwitchingClock};
use crate::error::{Error, Result};
use crate::market::{BarrierContract, MarketEnv, BETA};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    #[serde(default = "default_steps")]
    pub n_steps_per_year: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default = "default_block")]
    pub block_size: usize,
    /// Brownian-bridge continuity correction between monitoring dates.
    #[serde(default = "yes")]
    pub bridge: bool,
}

fn default_steps() -> usize {
    2080
}
fn default_block() -> usize {
    1024
}
fn yes() -> bool {
    true
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_paths: 100_000, n_steps_per_year: 2080, seed: 0, antithetic: false, block_size: 1024, bridge: true }
    }
}

impl McConfig {
    /// Desk-scale settings: 1e5 paths, 520 steps per year.
    pub fn desk(seed: u64) -> Self {
        Self { n_paths: 100_000, n_steps_per_year: 520, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_steps_per_year == 0 || self.block_size == 0 {
            return Err(Error::InvalidSpec("n_paths, n_steps_per_year and block_size must be positive".into()));
        }
        if self.antithetic && self.n_paths % 2 == 1 {
            return Err(Error::InvalidSpec("antithetic sampling needs an even number of paths".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, t: f64) -> usize {
        ((t * self.n_steps_per_year as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub price: f64,
    pub standard_error: f64,
    pub n_paths: usize,
    pub knockout_fraction: f64,
}

/// Normal stream for path `i`.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(2 * path);
    r
}

/// Uniform stream for the bridge kill decisions of path `i`.
pub fn kill_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(2 * path + 1);
    r
}

/// Sign applied to every normal draw (antithetic partner uses -1).
#[derive(Debug)]
pub struct NormalSource<R: Rng> {
    rng: R,
    sign: f64,
}

impl<R: Rng> NormalSource<R> {
    pub fn new(rng: R, antithetic: bool) -> Self {
        Self { rng, sign: if antithetic { -1.0 } else { 1.0 } }
    }

    #[inline]
    pub fn next(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        self.sign * z
    }
}

/// Sampled variance-factor path on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClockPath {
    pub dt: f64,
    /// Factor state (variance for CIR, OU state for squared OU, level for the chain).
    pub state: Vec<f64>,
    /// Instantaneous activity `v`.
    pub v: Vec<f64>,
    /// Clock `Gamma` at each grid point.
    pub gamma: Vec<f64>,
}

/// Simulates the variance factor and the clock on `n_steps` uniform steps.
/// CIR uses full-truncation Euler, squared OU the exact Gaussian step, the
/// Markov chain exact jump times; the clock is accumulated by the trapezoid
/// rule (exactly for the chain).
pub fn simulate_clock_path<R: Rng>(spec: &ClockSpec, t: f64, n_steps: usize, normals: &mut NormalSource<R>) -> Result<ClockPath> {
    let n = n_steps.max(1);
    let dt = t / n as f64;
    let mut state = Vec::with_capacity(n + 1);
    let mut v = Vec::with_capacity(n + 1);
    let mut gamma = Vec::with_capacity(n + 1);
    match spec {
        ClockSpec::Cir(c) => {
            let mut y = c.v0;
            state.push(y);
            v.push(y);
            gamma.push(0.0);
            for _ in 0..n {
                let yp = y.max(0.0);
                let next = y + c.kappa * (c.theta - yp) * dt + c.xi * (yp * dt).sqrt() * normals.next();
                let g = gamma.last().unwrap() + 0.5 * (yp + next.max(0.0)) * dt;
                y = next;
                state.push(y);
                v.push(y.max(0.0));
                gamma.push(g);
            }
        }
        ClockSpec::TimeDepCir(c) => {
            let mut y = c.v0;
            state.push(y);
            v.push(y);
            gamma.push(0.0);
            for i in 0..n {
                let (k, th, xi) = c.coefficients((i as f64 + 0.5) * dt);
                let yp = y.max(0.0);
                let next = y + k * (th - yp) * dt + xi * (yp * dt).sqrt() * normals.next();
                let g = gamma.last().unwrap() + 0.5 * (yp + next.max(0.0)) * dt;
                y = next;
                state.push(y);
                v.push(y.max(0.0));
                gamma.push(g);
            }
        }
        ClockSpec::SquaredOu(c) => {
            let e = (-c.alpha * dt).exp();
            let sd = c.sigma * ((1.0 - e * e) / (2.0 * c.alpha)).sqrt();
            let mut y = c.y0;
            state.push(y);
            v.push(y * y);
            gamma.push(0.0);
            for _ in 0..n {
                let next = y * e + sd * normals.next();
                let g = gamma.last().unwrap() + 0.5 * (y * y + next * next) * dt;
                y = next;
                state.push(y);
                v.push(y * y);
                gamma.push(g);
            }
        }
        ClockSpec::TwoFactorCir(c) => {
            let (mut a, mut b) = (c.fast.v0, c.slow.v0);
            let w = c.weight;
            let mix = |a: f64, b: f64| w * a.max(0.0) + (1.0 - w) * b.max(0.0);
            state.push(mix(a, b));
            v.push(mix(a, b));
            gamma.push(0.0);
            for _ in 0..n {
                let (ap, bp) = (a.max(0.0), b.max(0.0));
                let na = a + c.fast.kappa * (c.fast.theta - ap) * dt + c.fast.xi * (ap * dt).sqrt() * normals.next();
                let nb = b + c.slow.kappa * (c.slow.theta - bp) * dt + c.slow.xi * (bp * dt).sqrt() * normals.next();
                let g = gamma.last().unwrap() + 0.5 * (mix(a, b) + mix(na, nb)) * dt;
                a = na;
                b = nb;
                state.push(mix(a, b));
                v.push(mix(a, b));
                gamma.push(g);
            }
        }
        ClockSpec::MarkovSwitching(c) => simulate_chain(c, dt, n, normals, &mut state, &mut v, &mut gamma),
    }
    Ok(ClockPath { dt, state, v, gamma })
}

fn simulate_chain<R: Rng>(
    c: &MarkovSwitchingClock,
    dt: f64,
    n: usize,
    normals: &mut NormalSource<R>,
    state: &mut Vec<f64>,
    v: &mut Vec<f64>,
    gamma: &mut Vec<f64>,
) {
    // Uniforms derived from the normal stream keep a single stream per path.
    let mut unif = || {
        let z = normals.next().abs();
        let u = 1.0 - 2.0 * (1.0 - statrs_phi(z));
        u.clamp(1e-300, 1.0 - 1e-16)
    };
    let m = c.levels.len();
    let mut s = {
        let u = unif();
        let mut acc = 0.0;
        let mut pick = m - 1;
        for (i, p) in c.initial_dist.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    let rate = |s: usize| -c.generator[s][s];
    let mut next_jump = if rate(s) > 0.0 { -unif().ln() / rate(s) } else { f64::INFINITY };
    let mut g = 0.0;
    let mut now = 0.0;
    state.push(s as f64);
    v.push(c.levels[s]);
    gamma.push(0.0);
    for i in 1..=n {
        let target = i as f64 * dt;
        while next_jump <= target {
            g += c.levels[s] * (next_jump - now);
            now = next_jump;
            let u = unif() * rate(s);
            let mut acc = 0.0;
            let mut to = s;
            for j in 0..m {
                if j != s {
                    acc += c.generator[s][j];
                    if u < acc {
                        to = j;
                        break;
                    }
                }
            }
            s = to;
            next_jump = if rate(s) > 0.0 { now - unif().ln() / rate(s) } else { f64::INFINITY };
        }
        g += c.levels[s] * (target - now);
        now = target;
        state.push(s as f64);
        v.push(c.levels[s]);
        gamma.push(g);
    }
}

fn statrs_phi(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Barrier geometry in log-forward units used by the path loop.
#[derive(Debug, Clone, Copy)]
struct Monitor {
    h: Option<f64>,
    l: Option<f64>,
    bridge: bool,
}

impl Monitor {
    fn new(contract: &BarrierContract, bridge: bool) -> Self {
        Self { h: contract.log_upper(), l: contract.log_lower(), bridge }
    }

    fn breached(&self, x: f64) -> bool {
        self.h.map_or(false, |h| x >= h) || self.l.map_or(false, |l| x <= l)
    }

    /// Probability that a Brownian bridge with variance `var` between `a` and
    /// `b` (both inside) touches a barrier.
    fn cross_prob(&self, a: f64, b: f64, var: f64) -> (f64, f64) {
        if !self.bridge || var <= 0.0 {
            return (0.0, 0.0);
        }
        let up = self.h.map_or(0.0, |h| (-2.0 * (h - a) * (h - b) / var).exp());
        let dn = self.l.map_or(0.0, |l| (-2.0 * (a - l) * (b - l) / var).exp());
        (up, dn)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    sum: f64,
    sumsq: f64,
    n: usize,
    knocked: usize,
    paths: usize,
}

impl Acc {
    fn merge(mut self, o: Acc) -> Acc {
        self.sum += o.sum;
        self.sumsq += o.sumsq;
        self.n += o.n;
        self.knocked += o.knocked;
        self.paths += o.paths;
        self
    }

    fn finish(self, discount: f64) -> McEstimate {
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = if self.n > 1 { ((self.sumsq / n - mean * mean) * n / (n - 1.0)).max(0.0) } else { 0.0 };
        McEstimate {
            price: discount * mean,
            standard_error: discount * (var / n).sqrt(),
            n_paths: self.paths,
            knockout_fraction: self.knocked as f64 / self.paths as f64,
        }
    }
}

/// Runs `path_fn(path_index, antithetic)` -> (payoff, knocked) over all paths
/// in deterministic blocks.
fn run_paths<F>(cfg: &McConfig, path_fn: F) -> Acc
where
    F: Fn(u64, bool) -> (f64, bool) + Sync,
{
    let samples = if cfg.antithetic { cfg.n_paths / 2 } else { cfg.n_paths };
    let n_blocks = samples.div_ceil(cfg.block_size);
    let partials: Vec<Acc> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = Acc::default();
            let lo = b * cfg.block_size;
            let hi = (lo + cfg.block_size).min(samples);
            for i in lo..hi {
                let (p, k) = path_fn(i as u64, false);
                let (val, knocked, paths) = if cfg.antithetic {
                    let (q, k2) = path_fn(i as u64, true);
                    (0.5 * (p + q), k as usize + k2 as usize, 2)
                } else {
                    (p, k as usize, 1)
                };
                acc.sum += val;
                acc.sumsq += val * val;
                acc.n += 1;
                acc.knocked += knocked;
                acc.paths += paths;
            }
            acc
        })
        .collect();
    partials.into_iter().fold(Acc::default(), Acc::merge)
}

/// Barrier price with the clock independent of the log-forward driver.
pub fn price_barrier_mc_rho0(
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    cfg: &McConfig,
) -> Result<McEstimate> {
    cfg.validate()?;
    spec.validate()?;
    contract.check_geometry(market)?;
    let t = contract.maturity;
    let n = cfg.steps_for(t);
    let x0 = market.x0(t);
    let mon = Monitor::new(contract, cfg.bridge);
    let failure = std::sync::Mutex::new(None);
    let acc = run_paths(cfg, |i, anti| {
        let mut normals = NormalSource::new(path_rng(cfg.seed, i), anti);
        let mut kills = kill_rng(cfg.seed, i);
        let path = match simulate_clock_path(spec, t, n, &mut normals) {
            Ok(p) => p,
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
                return (0.0, false);
            }
        };
        let mut x = x0;
        for s in 0..n {
            let dg = path.gamma[s + 1] - path.gamma[s];
            let next = x + BETA * dg + dg.max(0.0).sqrt() * normals.next();
            if mon.breached(next) {
                return (0.0, true);
            }
            let (pu, pd) = mon.cross_prob(x, next, dg);
            if pu > 0.0 && kills.gen::<f64>() < pu {
                return (0.0, true);
            }
            if pd > 0.0 && kills.gen::<f64>() < pd {
                return (0.0, true);
            }
            x = next;
        }
        (contract.payoff(x.exp()), false)
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok(acc.finish(market.discount(t)))
}

/// Vanilla payoff of the contract on exactly the paths used by
/// [`price_barrier_mc_rho0`], with monitoring switched off.
pub fn price_vanilla_mc_rho0(
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    cfg: &McConfig,
) -> Result<McEstimate> {
    cfg.validate()?;
    spec.validate()?;
    let t = contract.maturity;
    let n = cfg.steps_for(t);
    let x0 = market.x0(t);
    let acc = run_paths(cfg, |i, anti| {
        let mut normals = NormalSource::new(path_rng(cfg.seed, i), anti);
        let path = simulate_clock_path(spec, t, n, &mut normals).expect("validated spec");
        let mut x = x0;
        for s in 0..n {
            let dg = path.gamma[s + 1] - path.gamma[s];
            x = x + BETA * dg + dg.max(0.0).sqrt() * normals.next();
        }
        (contract.payoff(x.exp()), false)
    });
    Ok(acc.finish(market.discount(t)))
}

/// Barrier price with instantaneous correlation `rho` between the log-forward
/// and variance drivers. The log-forward takes Euler steps with the
/// step-start variance; the bridge test uses `v_i dt` as operational time.
pub fn price_barrier_mc_correlated(
    contract: &BarrierContract,
    market: &MarketEnv,
    spec: &ClockSpec,
    rho: f64,
    cfg: &McConfig,
) -> Result<McEstimate> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("correlation must lie in [-1, 1], got {rho}")));
    }
    cfg.validate()?;
    spec.validate()?;
    contract.check_geometry(market)?;
    let t = contract.maturity;
    let n = cfg.steps_for(t);
    let dt = t / n as f64;
    let x0 = market.x0(t);
    let mon = Monitor::new(contract, cfg.bridge);
    let rbar = (1.0 - rho * rho).sqrt();
    enum Factor {
        Cir { k: f64, th: f64, xi: f64, v0: f64 },
        Ou { e: f64, sd: f64, y0: f64 },
    }
    let factor = match spec {
        ClockSpec::Cir(c) => Factor::Cir { k: c.kappa, th: c.theta, xi: c.xi, v0: c.v0 },
        ClockSpec::SquaredOu(c) => {
            let e = (-c.alpha * dt).exp();
            // Exact OU step; the driving normal is scaled to the step variance.
            let sd = c.sigma * ((1.0 - e * e) / (2.0 * c.alpha)).sqrt();
            Factor::Ou { e, sd, y0: c.y0 }
        }
        other => {
            return Err(Error::Unsupported(format!("correlated simulation for family {}", other.family())))
        }
    };
    let acc = run_paths(cfg, |i, anti| {
        let mut normals = NormalSource::new(path_rng(cfg.seed, i), anti);
        let mut kills = kill_rng(cfg.seed, i);
        let mut x = x0;
        let mut y = match factor {
            Factor::Cir { v0, .. } => v0,
            Factor::Ou { y0, .. } => y0,
        };
        for _ in 0..n {
            let zv = normals.next();
            let zp = normals.next();
            let zs = rho * zv + rbar * zp;
            let v = match factor {
                Factor::Cir { .. } => y.max(0.0),
                Factor::Ou { .. } => y * y,
            };
            y = match factor {
                Factor::Cir { k, th, xi, .. } => y + k * (th - v) * dt + xi * (v * dt).sqrt() * zv,
                Factor::Ou { e, sd, .. } => y * e + sd * zv,
            };
            let var = v * dt;
            let next = x + BETA * var + var.sqrt() * zs;
            if mon.breached(next) {
                return (0.0, true);
            }
            let (pu, pd) = mon.cross_prob(x, next, var);
            if pu > 0.0 && kills.gen::<f64>() < pu {
                return (0.0, true);
            }
            if pd > 0.0 && kills.gen::<f64>() < pd {
                return (0.0, true);
            }
            x = next;
        }
        (contract.payoff(x.exp()), false)
    });
    Ok(acc.finish(market.discount(t)))
}

/// Monte Carlo estimate of `E[exp(-lambda Gamma_T)]` with its standard error.
pub fn mc_clock_laplace(spec: &ClockSpec, t: f64, lambda: f64, cfg: &McConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    spec.validate()?;
    let n = cfg.steps_for(t);
    let acc = run_paths(cfg, |i, anti| {
        let mut normals = NormalSource::new(path_rng(cfg.seed, i), anti);
        let p = simulate_clock_path(spec, t, n, &mut normals).expect("validated spec");
        ((-lambda * p.gamma[n]).exp(), false)
    });
    let e = acc.finish(1.0);
    Ok((e.price, e.standard_error))
}

/// Monte Carlo estimate of `E[Gamma_T]` with its standard error.
pub fn mc_expected_clock(spec: &ClockSpec, t: f64, cfg: &McConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    spec.validate()?;
    let n = cfg.steps_for(t);
    let acc = run_paths(cfg, |i, anti| {
        let mut normals = NormalSource::new(path_rng(cfg.seed, i), anti);
        let p = simulate_clock_path(spec, t, n, &mut normals).expect("validated spec");
        (p.gamma[n], false)
    });
    let e = acc.finish(1.0);
    Ok((e.price, e.standard_error))
}

/// Mean and standard error of a per-path statistic `f(path_index, antithetic)`
/// under the same stream and block layout as the pricers.
pub fn path_mean<F>(cfg: &McConfig, f: F) -> Result<(f64, f64)>
where
    F: Fn(u64, bool) -> f64 + Sync,
{
    cfg.validate()?;
    let e = run_paths(cfg, |i, anti| (f(i, anti), false)).finish(1.0);
    Ok((e.price, e.standard_error))
}
