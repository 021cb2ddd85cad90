//! Adaptive Gauss-Kronrod quadrature on finite intervals and on `[0, inf)`.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 11] = [
    0.995657163025808080735527280689003,
    0.973906528517171720077964012084452,
    0.930157491355708226001207180059508,
    0.865063366688984510732096688423493,
    0.780817726586416897063717578345042,
    0.679409568299024406234327365114874,
    0.562757134668604683339000099272694,
    0.433395394129247190799265943165784,
    0.294392862701460198131126603103866,
    0.148874338981631210884826001129720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011694638867371874278064396062192,
    0.032558162307964727478818972459390,
    0.054755896574351996031381300244580,
    0.075039674810919952767043140916190,
    0.093125454583697605535065465083366,
    0.109387158802297641899210590325805,
    0.123491976262065851077208643474069,
    0.134709217311473325928054001771707,
    0.142775938577060080797094273138717,
    0.147739104901338491374841515972068,
    0.149445554002916905664936468389821,
];

// Gauss weights for the nodes XGK[1], XGK[3], ..., XGK[9].
const WG: [f64; 5] = [
    0.066671344308688137593568809893332,
    0.149451349150580593145776339657697,
    0.219086362515982043995534934228163,
    0.269266719309996355091226921569469,
    0.295524224714752870173892994651338,
];

/// 21-point Kronrod rule on `[a, b]`; returns (estimate, |K21 - G10|).
pub fn gk21<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = fc * WGK[10];
    let mut rg = 0.0;
    for j in 0..10 {
        let dx = hw * XGK[j];
        let s = f(c - dx) + f(c + dx);
        rk += WGK[j] * s;
        if j % 2 == 1 {
            rg += WG[j / 2] * s;
        }
    }
    (rk * hw, ((rk - rg) * hw).abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// First cutoff of the semi-infinite integrals.
    pub initial_cutoff: f64,
    pub cutoff_growth: f64,
    /// Maximum number of cutoff extensions.
    pub max_doublings: usize,
    /// Maximum number of bisections inside one adaptive call.
    pub max_subdivisions: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            abs_tol: 1e-12,
            initial_cutoff: 8.0,
            cutoff_growth: 2.0,
            max_doublings: 40,
            max_subdivisions: 2000,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::InvalidSpec("quadrature tolerances must be positive".into()));
        }
        if !(self.initial_cutoff > 0.0 && self.cutoff_growth > 1.0) {
            return Err(Error::InvalidSpec("cutoff must be positive and grow".into()));
        }
        Ok(())
    }
}

struct Panel {
    a: f64,
    b: f64,
    val: f64,
    err: f64,
}

impl PartialEq for Panel {
    fn eq(&self, o: &Self) -> bool {
        self.err == o.err
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Panel {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&o.err)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub evals: usize,
}

/// Globally adaptive GK21 on `[a, b]`: bisects the panel with the largest
/// error estimate until the total error is below `max(abs_tol, rel_tol*|I|)`.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_subdivisions: usize,
) -> Result<QuadResult> {
    if a == b {
        return Ok(QuadResult { value: 0.0, error: 0.0, evals: 0 });
    }
    let (v, e) = gk21(&mut f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Panel { a, b, val: v, err: e });
    let mut total = v;
    let mut err = e;
    let mut evals = 21;
    let mut splits = 0;
    loop {
        if !total.is_finite() {
            return Err(Error::Numerical(format!("non-finite integrand on [{a}, {b}]")));
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        if splits >= max_subdivisions {
            return Err(Error::Convergence {
                detail: format!("adaptive quadrature on [{a}, {b}] exhausted {max_subdivisions} subdivisions"),
                last: vec![total, err],
            });
        }
        let p = heap.pop().unwrap();
        let m = 0.5 * (p.a + p.b);
        if m <= p.a || m >= p.b {
            // Panel at machine resolution; accept what we have.
            heap.push(p);
            break;
        }
        let (v1, e1) = gk21(&mut f, p.a, m);
        let (v2, e2) = gk21(&mut f, m, p.b);
        evals += 42;
        splits += 1;
        total += v1 + v2 - p.val;
        err += e1 + e2 - p.err;
        heap.push(Panel { a: p.a, b: m, val: v1, err: e1 });
        heap.push(Panel { a: m, b: p.b, val: v2, err: e2 });
        if splits % 64 == 0 {
            // Re-sum to limit drift from incremental updates.
            total = heap.iter().map(|p| p.val).sum();
            err = heap.iter().map(|p| p.err).sum();
        }
    }
    let total: f64 = heap.iter().map(|p| p.val).sum();
    let err: f64 = heap.iter().map(|p| p.err).sum();
    Ok(QuadResult { value: total, error: err, evals })
}

/// Integral over `[0, inf)` of an oscillatory, eventually decaying integrand.
///
/// The range `[0, U]` is covered with panels no wider than `max_panel`, each
/// integrated adaptively. The cutoff grows geometrically until two successive
/// extensions change the estimate by less than the tolerance; the remaining
/// tail is integrated on the compactified variable `u = s / (1 - s)`.
pub fn integrate_semi_infinite<F: FnMut(f64) -> f64>(
    mut f: F,
    max_panel: f64,
    cfg: &QuadratureConfig,
) -> Result<QuadResult> {
    cfg.validate()?;
    let max_panel = if max_panel.is_finite() && max_panel > 0.0 { max_panel } else { f64::INFINITY };
    let mut total = 0.0;
    let mut err = 0.0;
    let mut evals = 0;
    let mut lo = 0.0;
    let mut hi = cfg.initial_cutoff;
    let mut quiet = 0;
    let mut history = Vec::new();
    for _ in 0..=cfg.max_doublings {
        let chunk = integrate_panels(&mut f, lo, hi, max_panel, cfg)?;
        total += chunk.value;
        err += chunk.error;
        evals += chunk.evals;
        history.push(total);
        let tol = cfg.abs_tol.max(cfg.rel_tol * total.abs());
        if chunk.value.abs() < tol {
            quiet += 1;
        } else {
            quiet = 0;
        }
        if quiet >= 2 {
            // Tail beyond the last cutoff on the compactified variable.
            let s0 = hi / (1.0 + hi);
            let tail = integrate(
                |s: f64| {
                    if s >= 1.0 {
                        return 0.0;
                    }
                    let om = 1.0 - s;
                    let u = s / om;
                    let v = f(u);
                    if v == 0.0 {
                        0.0
                    } else {
                        v / (om * om)
                    }
                },
                s0,
                1.0,
                cfg.rel_tol,
                tol,
                cfg.max_subdivisions,
            );
            if let Ok(t) = tail {
                total += t.value;
                err += t.error;
                evals += t.evals;
            }
            return Ok(QuadResult { value: total, error: err, evals });
        }
        lo = hi;
        hi *= cfg.cutoff_growth;
    }
    let n = history.len();
    Err(Error::Convergence {
        detail: format!("cutoff doubling did not settle after {} extensions", cfg.max_doublings),
        last: history[n.saturating_sub(2)..].to_vec(),
    })
}

fn integrate_panels<F: FnMut(f64) -> f64>(
    f: &mut F,
    lo: f64,
    hi: f64,
    max_panel: f64,
    cfg: &QuadratureConfig,
) -> Result<QuadResult> {
    let n = if max_panel.is_finite() { ((hi - lo) / max_panel).ceil().max(1.0) as usize } else { 1 };
    let w = (hi - lo) / n as f64;
    let mut out = QuadResult { value: 0.0, error: 0.0, evals: 0 };
    for i in 0..n {
        let a = lo + w * i as f64;
        let b = if i + 1 == n { hi } else { a + w };
        let r = integrate(&mut *f, a, b, cfg.rel_tol, cfg.abs_tol / n as f64, cfg.max_subdivisions)?;
        out.value += r.value;
        out.error += r.error;
        out.evals += r.evals;
    }
    Ok(out)
}

/// Composite trapezoid on an arbitrary sorted grid.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1])).sum()
}
