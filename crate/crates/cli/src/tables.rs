//! Reproduction of the published numerical tables (6.2 to 6.12).

use std::time::Instant;

use clockbarrier::barrier;
use clockbarrier::clock::{CirClock, ClockSpec, SquaredOuClock};
use clockbarrier::leverage::{expansion_coefficients, pade_fit, taylor_partial_sums, PdeGrid};
use clockbarrier::mc::{price_barrier_mc_correlated, price_barrier_mc_rho0, McConfig, McEstimate};
use clockbarrier::numerics::quad::QuadratureConfig;
use clockbarrier::{BarrierContract, ContractKind, MarketEnv};

use crate::output::Table;
use crate::{row, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    /// 1e5 paths, 520 steps per year.
    Desk,
    /// 1e6 paths, 2080 steps per year.
    Full,
}

impl Scale {
    pub fn mc(self, seed: u64) -> McConfig {
        match self {
            Scale::Desk => McConfig::desk(seed),
            Scale::Full => McConfig { n_paths: 1_000_000, n_steps_per_year: 2080, seed, ..McConfig::default() },
        }
    }
}

pub const TABLE_IDS: [&str; 11] = ["6.2", "6.3", "6.4", "6.5", "6.6", "6.7", "6.8", "6.9", "6.10", "6.11", "6.12"];

pub fn market() -> MarketEnv {
    MarketEnv::new(100.0, 0.03, 0.0)
}

pub const STRIKE: f64 = 100.0;
pub const LOWER: f64 = 70.0;
pub const UPPER: f64 = 130.0;

pub fn cir(regime: u8) -> ClockSpec {
    match regime {
        1 => ClockSpec::Cir(CirClock::new(0.6, 0.2, 0.4, 0.18)),
        _ => ClockSpec::Cir(CirClock::new(0.5, 0.45, 0.6, 0.48)),
    }
}

/// Squared OU clock with the long-run level of the matching CIR regime:
/// `eta = sqrt(2 a theta)`.
pub fn sqou(regime: u8) -> ClockSpec {
    let (v0, a, theta) = match regime {
        1 => (0.18_f64, 0.6_f64, 0.2_f64),
        _ => (0.48, 0.5, 0.45),
    };
    ClockSpec::SquaredOu(SquaredOuClock { y0: v0.sqrt(), alpha: a, sigma: (2.0 * a * theta).sqrt() })
}

pub fn contract(kind: ContractKind, t: f64) -> BarrierContract {
    match kind {
        ContractKind::UpOutPut => BarrierContract::uop(STRIKE, UPPER, t),
        _ => BarrierContract::doc(STRIKE, LOWER, t),
    }
}

/// One row of the independent-clock tables: (T, semi-analytic, MC, MC s.e.).
pub struct GoldenCase {
    pub table: &'static str,
    pub kind: ContractKind,
    pub clock: ClockSpec,
    pub maturity: f64,
    pub published: [f64; 3],
    pub tolerance: f64,
}

pub fn golden_cases() -> Vec<GoldenCase> {
    use ContractKind::{DownOutCall as Doc, UpOutPut as Uop};
    let mk = |table, kind, clock: ClockSpec, maturity, published, tolerance| GoldenCase { table, kind, clock, maturity, published, tolerance };
    vec![
        mk("6.2", Doc, cir(1), 0.25, [3.8247, 3.8293, 0.0069], 0.002),
        mk("6.2", Doc, cir(1), 1.0, [6.4521, 6.4582, 0.0116], 0.002),
        mk("6.3", Uop, cir(1), 0.25, [2.9873, 2.9842, 0.0056], 0.002),
        mk("6.3", Uop, cir(1), 1.0, [4.1056, 4.1097, 0.0104], 0.002),
        mk("6.4", Doc, cir(2), 0.25, [5.2134, 5.2195, 0.0102], 0.002),
        mk("6.4", Doc, cir(2), 1.0, [7.8923, 7.8856, 0.0174], 0.002),
        mk("6.5", Uop, cir(2), 0.25, [4.6521, 4.6589, 0.0098], 0.002),
        mk("6.5", Uop, cir(2), 1.0, [5.8234, 5.8337, 0.0159], 0.002),
        mk("6.6", Doc, sqou(1), 0.25, [3.8512, 3.8486, 0.0091], 0.005),
        mk("6.6", Doc, sqou(1), 1.0, [6.5234, 6.5339, 0.0162], 0.005),
        mk("6.7", Doc, sqou(2), 0.25, [5.3456, 5.3492, 0.0148], 0.005),
        mk("6.7", Doc, sqou(2), 1.0, [8.1234, 8.1406, 0.0245], 0.005),
    ]
}

/// Leverage study contract: DOC, CIR regime 1, T = 1.
pub fn leverage_case() -> (BarrierContract, ClockSpec) {
    (contract(ContractKind::DownOutCall, 1.0), cir(1))
}

/// Published first-order table: (rho, first-order value, MC price).
pub const PUBLISHED_FIRST_ORDER: [(f64, f64, f64); 11] = [
    (-0.5, 5.6182, 5.5923),
    (-0.4, 5.7896, 5.7712),
    (-0.3, 5.9561, 5.9456),
    (-0.2, 6.1213, 6.1178),
    (-0.1, 6.2879, 6.2904),
    (0.0, 6.4521, 6.4529),
    (0.1, 6.6163, 6.6345),
    (0.2, 6.7829, 6.8089),
    (0.3, 6.9481, 6.9845),
    (0.4, 7.1146, 7.1623),
    (0.5, 7.2860, 7.3412),
];

pub const PUBLISHED_COEFFICIENTS: [f64; 6] = [6.4521, 1.6468, -0.4123, 0.2845, -0.1523, 0.0892];

/// (rho, MC, order 1, order 3, order 5).
pub const PUBLISHED_TAYLOR: [(f64, f64, f64, f64, f64); 6] = [
    (-0.9, 4.2134, 3.9700, 3.9732, 3.9182),
    (-0.7, 4.9234, 4.2994, 4.2977, 4.2916),
    (-0.5, 5.5923, 5.6287, 5.6747, 5.7391),
    (0.5, 7.3412, 7.2755, 7.2952, 7.3276),
    (0.7, 7.7089, 7.6049, 7.6606, 7.7227),
    (0.9, 8.0912, 7.9343, 8.0500, 8.1497),
];

/// (rho, MC, Taylor O5, [2/2], [3/2]).
pub const PUBLISHED_PADE: [(f64, f64, f64, f64, f64); 8] = [
    (-0.9, 4.2134, 3.9182, 4.1827, 4.2053),
    (-0.7, 4.9234, 4.2916, 4.8757, 4.9082),
    (-0.5, 5.5923, 5.7391, 5.5612, 5.5838),
    (-0.3, 5.9456, 5.9672, 5.9378, 5.9432),
    (0.3, 6.9845, 6.9646, 6.9776, 6.9819),
    (0.5, 7.3412, 7.3276, 7.3308, 7.3385),
    (0.7, 7.7089, 7.7227, 7.6852, 7.6991),
    (0.9, 8.0912, 8.1497, 8.0612, 8.0806),
];

/// (|rho| band, Taylor O5 max error, best Padé max error, improvement).
pub const PUBLISHED_BANDS: [(f64, f64, f64, f64, f64); 4] = [
    (0.0, 0.3, 0.0036, 0.0004, 9.0),
    (0.3, 0.5, 0.0262, 0.0015, 17.0),
    (0.5, 0.7, 0.1283, 0.0031, 41.0),
    (0.7, 0.9, 0.07, 0.0019, 36.0),
];

fn timed<T>(label: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    eprintln!("{label}: {:.2} s", t.elapsed().as_secs_f64());
    out
}

fn golden_table(id: &str, scale: Scale, seed: u64) -> Result<Table, CliError> {
    let m = market();
    let q = QuadratureConfig::default();
    let mut t = Table::new(&[
        "T",
        "semi_analytic",
        "mc",
        "se",
        "rel_err",
        "published_semi_analytic",
        "published_mc",
        "published_se",
        "analytic_check",
        "mc_check",
    ]);
    for case in golden_cases().into_iter().filter(|c| c.table == id) {
        let c = contract(case.kind, case.maturity);
        let a = timed("semi-analytic", || barrier::price(&c, &m, &case.clock, &q))?;
        let e = timed("monte carlo", || price_barrier_mc_rho0(&c, &m, &case.clock, &scale.mc(seed)))?;
        t.push(row![
            case.maturity,
            a,
            e.price,
            e.standard_error,
            (e.price - a) / a,
            case.published[0],
            case.published[1],
            case.published[2],
            (a - case.published[0]).abs() <= case.tolerance,
            (e.price - a).abs() <= 3.0 * e.standard_error,
        ]);
    }
    Ok(t)
}

/// Coefficients `C_0..C_5` for the leverage case: Duhamel MC for `C_1`,
/// forced PDE beyond.
pub fn leverage_coefficients(scale: Scale, seed: u64) -> Result<(Vec<f64>, Vec<f64>, Vec<&'static str>), CliError> {
    let (c, spec) = leverage_case();
    let (e, _) = timed("expansion coefficients", || {
        expansion_coefficients(&c, &market(), &spec, 5, Some(&scale.mc(seed)), PdeGrid::default())
    })?;
    Ok((e.values, e.standard_errors, e.routes.iter().map(|r| r.label()).collect()))
}

fn correlated(rho: f64, scale: Scale, seed: u64) -> Result<McEstimate, CliError> {
    let (c, spec) = leverage_case();
    Ok(timed(&format!("correlated MC rho = {rho}"), || price_barrier_mc_correlated(&c, &market(), &spec, rho, &scale.mc(seed)))?)
}

fn first_order_table(scale: Scale, seed: u64) -> Result<Table, CliError> {
    let (c, spec) = leverage_case();
    let m = market();
    let v0 = barrier::price(&c, &m, &spec, &QuadratureConfig::default())?;
    let (c1, se1) = timed("Duhamel C1", || clockbarrier::leverage::duhamel_coefficient_1(&c, &m, &spec, &scale.mc(seed)))?;
    let mut t = Table::new(&[
        "rho", "v0", "rho_c1", "first_order", "c1_se", "mc", "se", "rel_err", "published_first_order", "published_mc", "check",
    ]);
    for (rho, pf, pm) in PUBLISHED_FIRST_ORDER {
        let e = correlated(rho, scale, seed)?;
        let first = v0 + rho * c1;
        let rel = (first - e.price) / e.price;
        let check = if rho.abs() <= 0.3 + 1e-12 { Some(rel.abs() <= 0.005) } else { None };
        t.push(row![rho, v0, rho * c1, first, se1, e.price, e.standard_error, rel, pf, pm, check]);
    }
    Ok(t)
}

fn coefficient_table(scale: Scale, seed: u64) -> Result<Table, CliError> {
    let (v, se, routes) = leverage_coefficients(scale, seed)?;
    let mut t = Table::new(&["n", "value", "standard_error", "route", "published_value", "check"]);
    for n in 0..v.len() {
        let check = match n {
            0 => Some((v[0] - PUBLISHED_COEFFICIENTS[0]).abs() <= 0.002),
            1 => Some((v[1] / PUBLISHED_COEFFICIENTS[1] - 1.0).abs() <= 0.05),
            _ => None,
        };
        t.push(row![n, v[n], se[n], routes[n], PUBLISHED_COEFFICIENTS[n], check]);
    }
    Ok(t)
}

fn taylor_table(scale: Scale, seed: u64) -> Result<Table, CliError> {
    let (v, _, _) = leverage_coefficients(scale, seed)?;
    let mut t = Table::new(&[
        "rho", "mc", "se", "order_1", "order_3", "order_5", "published_mc", "published_order_1", "published_order_3", "published_order_5",
    ]);
    for (rho, pm, p1, p3, p5) in PUBLISHED_TAYLOR {
        let e = correlated(rho, scale, seed)?;
        let s = taylor_partial_sums(&v, rho);
        t.push(row![rho, e.price, e.standard_error, s[1], s[3], s[5], pm, p1, p3, p5]);
    }
    Ok(t)
}

pub struct PadeRow {
    pub rho: f64,
    pub mc: McEstimate,
    pub taylor5: f64,
    pub p22: f64,
    pub p32: f64,
}

pub fn pade_rows(scale: Scale, seed: u64) -> Result<Vec<PadeRow>, CliError> {
    let (v, _, _) = leverage_coefficients(scale, seed)?;
    let p22 = pade_fit(&v, 2, 2)?;
    let p32 = pade_fit(&v, 3, 2)?;
    eprintln!("[2/2] poles {:?}; [3/2] poles {:?}", p22.poles, p32.poles);
    PUBLISHED_PADE
        .iter()
        .map(|(rho, ..)| {
            Ok(PadeRow {
                rho: *rho,
                mc: correlated(*rho, scale, seed)?,
                taylor5: taylor_partial_sums(&v, *rho)[5],
                p22: p22.eval(*rho),
                p32: p32.eval(*rho),
            })
        })
        .collect()
}

fn pade_table(scale: Scale, seed: u64) -> Result<Table, CliError> {
    let rows = pade_rows(scale, seed)?;
    let published22 = pade_fit(&PUBLISHED_COEFFICIENTS, 2, 2)?;
    let published32 = pade_fit(&PUBLISHED_COEFFICIENTS, 3, 2)?;
    let mut t = Table::new(&[
        "rho",
        "mc",
        "se",
        "taylor_5",
        "pade_2_2",
        "pade_3_2",
        "pade_2_2_published_coeffs",
        "pade_3_2_published_coeffs",
        "published_mc",
        "published_taylor_5",
        "published_pade_2_2",
        "published_pade_3_2",
        "check",
    ]);
    for (r, (_, pm, pt, p22, p32)) in rows.iter().zip(PUBLISHED_PADE) {
        let a = published22.eval(r.rho);
        let b = published32.eval(r.rho);
        let check = (a - p22).abs() <= 0.02 && (b - p32).abs() <= 0.02;
        t.push(row![r.rho, r.mc.price, r.mc.standard_error, r.taylor5, r.p22, r.p32, a, b, pm, pt, p22, p32, check]);
    }
    Ok(t)
}

fn band_table(scale: Scale, seed: u64) -> Result<Table, CliError> {
    let rows = pade_rows(scale, seed)?;
    let mut t = Table::new(&[
        "band_lo",
        "band_hi",
        "taylor_5_max_err",
        "best_pade_max_err",
        "improvement",
        "published_taylor_5_max_err",
        "published_best_pade_max_err",
        "published_improvement",
        "check",
    ]);
    for (lo, hi, pt, pp, pi) in PUBLISHED_BANDS {
        let band: Vec<&PadeRow> = rows.iter().filter(|r| r.rho.abs() > lo + 1e-12 || lo == 0.0).filter(|r| r.rho.abs() <= hi + 1e-12).collect();
        let err = |f: &dyn Fn(&PadeRow) -> f64| band.iter().map(|r| ((f(r) - r.mc.price) / r.mc.price).abs()).fold(0.0, f64::max);
        let et = err(&|r| r.taylor5);
        let ep = err(&|r| r.p22).min(err(&|r| r.p32));
        let imp = et / ep;
        t.push(row![lo, hi, et, ep, imp, pt, pp, pi, imp >= 5.0]);
    }
    Ok(t)
}

pub fn repro_table(id: &str, scale: Scale, seed: u64) -> Result<Table, CliError> {
    match id {
        "6.2" | "6.3" | "6.4" | "6.5" | "6.6" | "6.7" => golden_table(id, scale, seed),
        "6.8" => first_order_table(scale, seed),
        "6.9" => coefficient_table(scale, seed),
        "6.10" => taylor_table(scale, seed),
        "6.11" => pade_table(scale, seed),
        "6.12" => band_table(scale, seed),
        other => Err(CliError::Validation(format!("unknown table '{other}'; expected one of {}", TABLE_IDS.join(", ")))),
    }
}
