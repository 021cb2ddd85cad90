//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

#[path = "common/props.rs"]
mod props;

use std::time::Instant;

use clockbarrier::barrier::{self, dirichlet_grid, dko_coefficients, price_doc, price_dko_spec, price_uop};
use clockbarrier::calibrate::{run_stage_pipeline, synthetic_dataset, CalibrationConfig, Family};
use clockbarrier::clock::{build_transform_cache, phi_conditional, CirClock, ClockSpec, MarkovSwitchingClock, SquaredOuClock};
use clockbarrier::leverage::{
    baseline_u0_with, evaluate_with_fallback, expansion_coefficients, mixed_derivative_u0, pade_fit, FallbackPolicy, PdeGrid,
};
use clockbarrier::mc::{price_barrier_mc_correlated, price_barrier_mc_rho0, McConfig};
use clockbarrier::numerics::quad::QuadratureConfig;
use clockbarrier::vanilla::{cos_price, OptionKind};
use clockbarrier::{BarrierContract, MarketEnv};
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = Result<(bool, String), String>;

const SEED: u64 = 20240611;

const COEFFS: [f64; 6] = [6.4521, 1.6468, -0.4123, 0.2845, -0.1523, 0.0892];

/// (rho, [2/2], [3/2]).
const PADE_VALUES: [(f64, f64, f64); 4] = [(-0.9, 4.1827, 4.2053), (-0.7, 4.8757, 4.9082), (0.5, 7.3308, 7.3385), (0.9, 8.0612, 8.0806)];

fn market() -> MarketEnv {
    MarketEnv::new(100.0, 0.03, 0.0)
}

fn cir(regime: u8) -> ClockSpec {
    match regime {
        1 => ClockSpec::Cir(CirClock::new(0.6, 0.2, 0.4, 0.18)),
        _ => ClockSpec::Cir(CirClock::new(0.5, 0.45, 0.6, 0.48)),
    }
}

fn sqou(regime: u8) -> ClockSpec {
    let (v0, a, theta) = if regime == 1 { (0.18_f64, 0.6, 0.2) } else { (0.48, 0.5, 0.45) };
    ClockSpec::SquaredOu(SquaredOuClock { y0: v0.sqrt(), alpha: a, sigma: (2.0 * a * theta).sqrt() })
}

fn flat(level: f64) -> ClockSpec {
    ClockSpec::MarkovSwitching(MarkovSwitchingClock { generator: vec![vec![0.0]], levels: vec![level], initial_dist: vec![1.0] })
}

struct Golden {
    label: &'static str,
    contract: BarrierContract,
    clock: ClockSpec,
    value: f64,
    tol: f64,
}

fn golden() -> Vec<Golden> {
    let doc = |t| BarrierContract::doc(100.0, 70.0, t);
    let uop = |t| BarrierContract::uop(100.0, 130.0, t);
    let g = |label, contract, clock, value, tol| Golden { label, contract, clock, value, tol };
    vec![
        g("DOC cir1 T=0.25", doc(0.25), cir(1), 3.8247, 0.002),
        g("DOC cir1 T=1", doc(1.0), cir(1), 6.4521, 0.002),
        g("UOP cir1 T=0.25", uop(0.25), cir(1), 2.9873, 0.002),
        g("UOP cir1 T=1", uop(1.0), cir(1), 4.1056, 0.002),
        g("DOC cir2 T=0.25", doc(0.25), cir(2), 5.2134, 0.002),
        g("DOC cir2 T=1", doc(1.0), cir(2), 7.8923, 0.002),
        g("UOP cir2 T=0.25", uop(0.25), cir(2), 4.6521, 0.002),
        g("UOP cir2 T=1", uop(1.0), cir(2), 5.8234, 0.002),
        g("DOC ou1 T=0.25", doc(0.25), sqou(1), 3.8512, 0.005),
        g("DOC ou1 T=1", doc(1.0), sqou(1), 6.5234, 0.005),
        g("DOC ou2 T=0.25", doc(0.25), sqou(2), 5.3456, 0.005),
        g("DOC ou2 T=1", doc(1.0), sqou(2), 8.1234, 0.005),
    ]
}

fn ncdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

/// Black-world up-and-out put in forward units, total variance `g`.
fn image_uop(f0: f64, k: f64, h: f64, g: f64) -> f64 {
    let (x0, lh) = (f0.ln(), h.ln());
    let m = k.ln().min(lh);
    let s = g.sqrt();
    let part = |mu: f64| k * ncdf((m - mu) / s) - (mu + 0.5 * g).exp() * ncdf((m - mu - g) / s);
    part(x0 - 0.5 * g) - (-(lh - x0)).exp() * part(2.0 * lh - x0 - 0.5 * g)
}

/// Black-world down-and-out call in forward units, total variance `g`.
fn image_doc(f0: f64, k: f64, l: f64, g: f64) -> f64 {
    let (x0, ll) = (f0.ln(), l.ln());
    let m = k.ln().max(ll);
    let s = g.sqrt();
    let part = |mu: f64| (mu + 0.5 * g).exp() * ncdf((mu + g - m) / s) - k * ncdf((mu - m) / s);
    part(x0 - 0.5 * g) - (-(ll - x0)).exp() * part(2.0 * ll - x0 - 0.5 * g)
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn golden_values() -> Outcome {
    let q = QuadratureConfig::default();
    let mut ok = true;
    let mut worst = (0.0_f64, "");
    let mut slowest = 0.0_f64;
    for g in golden() {
        let started = Instant::now();
        let p = barrier::price(&g.contract, &market(), &g.clock, &q).map_err(err)?;
        slowest = slowest.max(started.elapsed().as_secs_f64());
        let d = (p - g.value).abs();
        ok &= d <= g.tol;
        eprintln!("  {}: {p:.4} (published {:.4})", g.label, g.value);
        if d > worst.0 {
            worst = (d, g.label);
        }
    }
    ok &= slowest < 1.0;
    Ok((ok, format!("max |diff| {:.4} at {}, slowest price {slowest:.3} s", worst.0, worst.1)))
}

fn analytic_vs_mc() -> Outcome {
    let q = QuadratureConfig::default();
    let mut ok = true;
    let mut worst = 0.0_f64;
    let mut slowest = 0.0_f64;
    for g in golden() {
        let a = barrier::price(&g.contract, &market(), &g.clock, &q).map_err(err)?;
        let started = Instant::now();
        let e = price_barrier_mc_rho0(&g.contract, &market(), &g.clock, &McConfig::desk(SEED)).map_err(err)?;
        slowest = slowest.max(started.elapsed().as_secs_f64());
        let z = (e.price - a).abs() / e.standard_error;
        eprintln!("  {}: analytic {a:.4}, mc {:.4} +- {:.4} ({z:.2} se)", g.label, e.price, e.standard_error);
        ok &= z <= 3.0;
        worst = worst.max(z);
    }
    ok &= slowest < 60.0;
    Ok((ok, format!("max deviation {worst:.2} se, slowest run {slowest:.1} s")))
}

fn image_oracle() -> Outcome {
    let q = QuadratureConfig::default();
    let m = MarketEnv::new(100.0, 0.0, 0.0);
    let var = 0.04;
    let mut worst = 0.0_f64;
    let mut n = 0;
    for (k, h, t) in [(100.0, 130.0, 1.0), (90.0, 110.0, 0.5), (120.0, 115.0, 2.0), (80.0, 150.0, 0.25), (105.0, 104.0, 1.5)] {
        for scale in [1.0, 0.5] {
            let tt = t * scale;
            let c = BarrierContract::uop(k, h, tt);
            let g = var * tt;
            let p = price_uop(&c, &m, &move |l: f64| Ok((-l * g).exp()), &q).map_err(err)?;
            worst = worst.max((p / image_uop(100.0, k, h, g) - 1.0).abs());
            n += 1;
        }
    }
    for (k, l, t) in [(100.0, 70.0, 1.0), (95.0, 90.0, 0.5), (80.0, 85.0, 2.0), (120.0, 60.0, 0.25), (98.0, 97.0, 1.5)] {
        for scale in [1.0, 0.5] {
            let tt = t * scale;
            let c = BarrierContract::doc(k, l, tt);
            let g = var * tt;
            let p = price_doc(&c, &m, &move |x: f64| Ok((-x * g).exp()), &q).map_err(err)?;
            worst = worst.max((p / image_doc(100.0, k, l, g) - 1.0).abs());
            n += 1;
        }
    }
    Ok((worst <= 1e-6 && n == 20, format!("{n} cases, max rel err {worst:.2e}")))
}

fn barrier_removal() -> Outcome {
    let q = QuadratureConfig::default();
    let m = market();
    let spec = cir(1);
    let uop = barrier::price(&BarrierContract::uop(100.0, 1000.0, 1.0), &m, &spec, &q).map_err(err)?;
    let put = cos_price(&spec, &m, 1.0, 100.0, OptionKind::Put).map_err(err)?;
    let doc = barrier::price(&BarrierContract::doc(100.0, 10.0, 1.0), &m, &spec, &q).map_err(err)?;
    let call = cos_price(&spec, &m, 1.0, 100.0, OptionKind::Call).map_err(err)?;
    let (ru, rd) = ((uop / put - 1.0).abs(), (doc / call - 1.0).abs());
    Ok((ru <= 1e-3 && rd <= 1e-3, format!("UOP/put rel {ru:.2e}, DOC/call rel {rd:.2e}")))
}

fn dko_checks() -> Outcome {
    let m = market();
    let spec = cir(1);
    let mut drift = 0.0_f64;
    for t in [0.25, 1.0] {
        let c = BarrierContract::dko_call(100.0, 70.0, 130.0, t);
        let p = price_dko_spec(&c, &m, &spec).map_err(err)?;
        let width = (130f64 / 70.0).ln();
        let grid = dirichlet_grid(width, 2 * p.terms.max(8));
        let cache = build_transform_cache(&spec, 0.0, t, &grid, None).map_err(err)?;
        let coeffs = dko_coefficients(&c, cache.len()).map_err(err)?;
        let x0 = m.x0(t);
        let full: f64 = coeffs
            .iter()
            .zip(cache.values())
            .enumerate()
            .map(|(i, (a, ph))| {
                let w = (i + 1) as f64 * std::f64::consts::PI / width;
                (w * (x0 - 70f64.ln())).sin() * a * ph
            })
            .sum::<f64>()
            * 2.0
            / width
            * (0.5 * x0).exp()
            * m.discount(t);
        drift = drift.max((full - p.price).abs());
    }
    let dead = price_dko_spec(&BarrierContract::dko_call(140.0, 70.0, 130.0, 1.0), &m, &spec).map_err(err)?.price;
    let clock = flat(0.04);
    let c = BarrierContract::dko_call(100.0, 85.0, 125.0, 0.5);
    let exact = price_dko_spec(&c, &m, &clock).map_err(err)?.price;
    let cfg = McConfig { n_paths: 1_000_000, n_steps_per_year: 52, seed: SEED, ..McConfig::default() };
    let e = price_barrier_mc_rho0(&c, &m, &clock, &cfg).map_err(err)?;
    let z = (e.price - exact).abs() / e.standard_error;
    Ok((
        drift <= 1e-8 && dead == 0.0 && z <= 3.0,
        format!("doubling drift {drift:.1e}, K>=H price {dead}, corridor {exact:.5} vs mc {:.5} ({z:.2} se)", e.price),
    ))
}

struct Leverage {
    coeffs: Vec<f64>,
    c1_se: f64,
}

fn leverage_case() -> (BarrierContract, ClockSpec) {
    (BarrierContract::doc(100.0, 70.0, 1.0), cir(1))
}

fn leverage_coefficients() -> Result<Leverage, String> {
    let (c, spec) = leverage_case();
    let (e, _) = expansion_coefficients(&c, &market(), &spec, 5, Some(&McConfig::desk(SEED)), PdeGrid::default()).map_err(err)?;
    eprintln!("  coefficients {:?} (C1 s.e. {:.4})", e.values, e.standard_errors[1]);
    Ok(Leverage { c1_se: e.standard_errors[1], coeffs: e.values })
}

fn first_order(lev: &Leverage) -> Outcome {
    let (c, spec) = leverage_case();
    let c1 = lev.coeffs[1];
    let c1_rel = (c1 / COEFFS[1] - 1.0).abs();
    let first = lev.coeffs[0] - 0.3 * c1;
    let cfg = McConfig { n_paths: 1_000_000, n_steps_per_year: 520, seed: SEED, ..McConfig::default() };
    let e = price_barrier_mc_correlated(&c, &market(), &spec, -0.3, &cfg).map_err(err)?;
    let rel = (first / e.price - 1.0).abs();
    Ok((
        c1_rel <= 0.05 && rel <= 0.005,
        format!(
            "C1 {c1:.4} +- {:.4} vs 1.6468 (rel {c1_rel:.3}); first order at -0.3 {first:.4} vs mc {:.4} +- {:.4} (rel {rel:.4})",
            lev.c1_se, e.price, e.standard_error
        ),
    ))
}

fn pade_machinery() -> Outcome {
    let mut reexp = 0.0_f64;
    for (l, m) in [(1, 1), (2, 2), (3, 2), (2, 3), (1, 2), (2, 1)] {
        let p = pade_fit(&COEFFS, l, m).map_err(err)?;
        let back = p.reexpand(l + m + 1);
        for (a, b) in back.iter().zip(&COEFFS) {
            reexp = reexp.max((a - b).abs() / b.abs());
        }
    }
    let p22 = pade_fit(&COEFFS, 2, 2).map_err(err)?;
    let p32 = pade_fit(&COEFFS, 3, 2).map_err(err)?;
    let min_im = p22.poles.iter().map(|z| z.im.abs()).fold(f64::INFINITY, f64::min);
    let mut worst = 0.0_f64;
    for (rho, v22, v32) in PADE_VALUES {
        worst = worst.max((p22.eval(rho) - v22).abs()).max((p32.eval(rho) - v32).abs());
    }
    let poles: Vec<String> = p22.poles.iter().map(|z| format!("{:.3}{:+.3}i", z.re, z.im)).collect();
    Ok((
        reexp <= 1e-10 && min_im > 4.0 && worst <= 0.02,
        format!("re-expansion {reexp:.1e}; [2/2] poles {} (min |Im| {min_im:.3}); max value diff {worst:.4}", poles.join(", ")),
    ))
}

fn pade_vs_mc(lev: &Leverage) -> Outcome {
    let (c, spec) = leverage_case();
    let policy = FallbackPolicy::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for rho in [-0.9, 0.9] {
        let (v, route) = evaluate_with_fallback(&lev.coeffs, rho, &policy);
        let e = price_barrier_mc_correlated(&c, &market(), &spec, rho, &McConfig::desk(SEED)).map_err(err)?;
        let rel = (v / e.price - 1.0).abs();
        ok &= rel <= 0.015;
        parts.push(format!("rho {rho}: {route} {v:.4} vs mc {:.4} +- {:.4} (rel {rel:.4})", e.price, e.standard_error));
    }
    Ok((ok, parts.join("; ")))
}

fn derivatives() -> Outcome {
    let tight = QuadratureConfig { rel_tol: 1e-13, abs_tol: 1e-15, ..QuadratureConfig::default() };
    let mut worst_phi = 0.0_f64;
    let specs = [cir(1), sqou(1), cir(2), sqou(2)];
    let mut n_phi = 0;
    for spec in &specs {
        for (y, lambda) in [(0.05, 1.0), (0.18, 10.0), (0.4, 0.1), (0.7, 100.0), (0.3, 3.0)] {
            let c = phi_conditional(spec, 0.2, 1.0, lambda, y).map_err(err)?;
            let h = 1e-5 * y.abs().max(1.0);
            let up = phi_conditional(spec, 0.2, 1.0, lambda, y + h).map_err(err)?.phi;
            let dn = phi_conditional(spec, 0.2, 1.0, lambda, y - h).map_err(err)?.phi;
            let an = c.dphi_dy.ok_or("missing state derivative")?;
            worst_phi = worst_phi.max(((an - (up - dn) / (2.0 * h)) / an).abs());
            n_phi += 1;
        }
    }
    let m = market();
    let ou = ClockSpec::SquaredOu(SquaredOuClock { alpha: 1.5, sigma: 0.4, y0: 0.4 });
    let cases = [
        (BarrierContract::doc(100.0, 70.0, 1.0), cir(1)),
        (BarrierContract::uop(100.0, 130.0, 1.0), cir(1)),
        (BarrierContract::dko_call(95.0, 75.0, 135.0, 1.0), cir(1)),
        (BarrierContract::doc(100.0, 70.0, 1.0), ou),
    ];
    let mut worst_mixed = 0.0_f64;
    let mut n_mixed = 0;
    for (c, spec) in &cases {
        let l = c.log_lower().unwrap_or(3.9);
        let h = c.log_upper().unwrap_or(5.4);
        for (t, fx, y) in [(0.0, 0.3, 0.18), (0.4, 0.55, 0.1), (0.7, 0.8, 0.3), (0.2, 0.15, 0.25), (0.5, 0.65, 0.4)] {
            let x = l + fx * (h - l);
            let (hx, hy) = (1e-4, 1e-5);
            let u = |dx: f64, dy: f64| baseline_u0_with(t, x + dx, y + dy, c, &m, spec, &tight);
            let fd = (u(hx, hy).map_err(err)? - u(hx, -hy).map_err(err)? - u(-hx, hy).map_err(err)? + u(-hx, -hy).map_err(err)?)
                / (4.0 * hx * hy);
            let an = mixed_derivative_u0(t, x, y, c, &m, spec, &tight).map_err(err)?;
            worst_mixed = worst_mixed.max((an - fd).abs() / an.abs().max(1e-2));
            n_mixed += 1;
        }
    }
    Ok((
        worst_phi <= 1e-6 && worst_mixed <= 1e-4,
        format!("state derivative {n_phi} points max rel {worst_phi:.1e}; mixed derivative {n_mixed} points max rel {worst_mixed:.1e}"),
    ))
}

fn calibration() -> Outcome {
    let started = Instant::now();
    let grid: Vec<(f64, Vec<f64>)> = [0.25, 0.5, 1.0].iter().map(|t| (*t, vec![80.0, 90.0, 100.0, 110.0, 120.0])).collect();
    let barriers = [
        BarrierContract::doc(100.0, 80.0, 1.0),
        BarrierContract::uop(100.0, 120.0, 1.0),
        BarrierContract::doc(100.0, 85.0, 0.5),
        BarrierContract::uop(100.0, 115.0, 0.5),
    ];
    let data = synthetic_dataset(&cir(1), &market(), -0.4, &grid, &barriers, 3, PdeGrid { nx: 100, ny: 40, nt: 100 }).map_err(err)?;
    let res = run_stage_pipeline(&data, &CalibrationConfig::new(Family::Cir)).map_err(err)?;
    let secs = started.elapsed().as_secs_f64();
    let ClockSpec::Cir(c) = res.spec else { return Err("calibration returned a non-CIR clock".into()) };
    let (dv, dt) = ((c.v0 / 0.18 - 1.0).abs(), (c.theta / 0.2 - 1.0).abs());
    Ok((
        (res.rho + 0.4).abs() <= 0.05 && dv <= 0.02 && dt <= 0.02 && secs < 600.0,
        format!("rho {:.4}, v0 {:.5} ({dv:.4}), theta {:.5} ({dt:.4}) in {secs:.1} s", res.rho, c.v0, c.theta),
    ))
}

fn properties() -> Outcome {
    props::transform_shape(256)?;
    props::price_bounds(48)?;
    props::mc_determinism(24)?;
    Ok((true, "transform shape, price bounds and MC determinism".into()))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: &str, name: &str, out: Outcome, started: Instant| {
        let secs = started.elapsed().as_secs_f64();
        let (ok, detail) = out.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !ok {
            failed += 1;
        }
        println!("{} {id} {name}: {detail} [{secs:.1} s]", if ok { "PASS" } else { "FAIL" });
    };
    let t = Instant::now();
    report("1", "golden values", golden_values(), t);
    let t = Instant::now();
    report("2", "analytic vs Monte Carlo", analytic_vs_mc(), t);
    let t = Instant::now();
    report("3", "deterministic-clock images", image_oracle(), t);
    let t = Instant::now();
    report("4", "barrier removal", barrier_removal(), t);
    let t = Instant::now();
    report("5", "double barrier series", dko_checks(), t);
    let t = Instant::now();
    let lev = leverage_coefficients();
    match &lev {
        Ok(l) => report("6", "first-order leverage", first_order(l), t),
        Err(e) => report("6", "first-order leverage", Err(e.clone()), t),
    }
    let t = Instant::now();
    report("7", "Pade machinery", pade_machinery(), t);
    let t = Instant::now();
    match &lev {
        Ok(l) => report("8", "resummed leverage vs Monte Carlo", pade_vs_mc(l), t),
        Err(e) => report("8", "resummed leverage vs Monte Carlo", Err(e.clone()), t),
    }
    let t = Instant::now();
    report("9", "derivative checks", derivatives(), t);
    let t = Instant::now();
    report("10", "calibration round trip", calibration(), t);
    let t = Instant::now();
    report("11", "property suites", properties(), t);
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
