//! Property checks shared by the standalone property suite and the
//! acceptance run.

#![allow(dead_code)]

use clockbarrier::barrier;
use clockbarrier::clock::{CirClock, ClockSpec, MarkovSwitchingClock, SquaredOuClock, TwoFactorCirClock};
use clockbarrier::mc::{price_barrier_mc_rho0, McConfig};
use clockbarrier::numerics::quad::QuadratureConfig;
use clockbarrier::vanilla::{cos_price, OptionKind};
use clockbarrier::{BarrierContract, MarketEnv};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub fn clock() -> impl Strategy<Value = ClockSpec> {
    prop_oneof![
        (0.1f64..3.0, 0.02f64..0.6, 0.05f64..1.0, 0.02f64..0.6)
            .prop_map(|(k, t, x, v)| ClockSpec::Cir(CirClock::new(k, t, x, v))),
        (0.1f64..3.0, 0.05f64..1.0, -0.8f64..0.8)
            .prop_map(|(a, s, y)| ClockSpec::SquaredOu(SquaredOuClock { alpha: a, sigma: s, y0: y })),
        (0.1f64..3.0, 0.1f64..3.0, 0.01f64..0.3, 0.05f64..0.8, 0.0f64..1.0).prop_map(|(q1, q2, l1, l2, p)| {
            ClockSpec::MarkovSwitching(MarkovSwitchingClock {
                generator: vec![vec![-q1, q1], vec![q2, -q2]],
                levels: vec![l1, l2],
                initial_dist: vec![p, 1.0 - p],
            })
        }),
        (0.2f64..0.8, 2.0f64..8.0, 0.1f64..1.0, 0.02f64..0.4, 0.02f64..0.4).prop_map(|(w, kf, ks, th, v)| {
            ClockSpec::TwoFactorCir(TwoFactorCirClock {
                weight: w,
                fast: CirClock::new(kf, th, 0.5, v),
                slow: CirClock::new(ks, th, 0.3, v),
            })
        }),
    ]
}

pub fn market() -> MarketEnv {
    MarketEnv::new(100.0, 0.03, 0.0)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn lift<T>(r: clockbarrier::Result<T>) -> Result<T, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(e.to_string()))
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

fn report<S: std::fmt::Debug>(r: Result<(), proptest::test_runner::TestError<S>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

/// `Phi(0) = 1`, `Phi` non-increasing and convex in `lambda`.
pub fn transform_shape(cases: u32) -> Result<(), String> {
    let s = (clock(), 0.05f64..3.0, 0.0f64..50.0, 0.01f64..20.0);
    report(runner(cases).run(&s, |(spec, t, l, d)| {
        let phi = |x: f64| lift(spec.phi(t, x));
        let at0 = phi(0.0)?;
        ensure((at0 - 1.0).abs() < 1e-12, || format!("Phi(0) = {at0}"))?;
        let (a, m, b) = (phi(l)?, phi(l + d)?, phi(l + 2.0 * d)?);
        ensure(a >= m - 1e-14 && m >= b - 1e-14, || format!("not monotone: {a} {m} {b}"))?;
        ensure(m <= 0.5 * (a + b) + 1e-12, || format!("not convex: {a} {m} {b}"))?;
        Ok(())
    }))
}

/// Knock-out prices are non-negative and bounded by the matching vanilla.
pub fn price_bounds(cases: u32) -> Result<(), String> {
    let s = (clock(), 0.1f64..2.0, 70.0f64..130.0, 0.6f64..0.95, 1.05f64..1.5);
    report(runner(cases).run(&s, |(spec, t, k, lo, hi)| {
        let m = market();
        let f = m.forward(t);
        let q = QuadratureConfig::default();
        let call = lift(cos_price(&spec, &m, t, k, OptionKind::Call))?;
        let put = lift(cos_price(&spec, &m, t, k, OptionKind::Put))?;
        let doc = lift(barrier::price(&BarrierContract::doc(k, lo * f, t), &m, &spec, &q))?;
        let uop = lift(barrier::price(&BarrierContract::uop(k, hi * f, t), &m, &spec, &q))?;
        let dko = lift(barrier::price(&BarrierContract::dko_call(k, lo * f, hi * f, t), &m, &spec, &q))?;
        let tol = 1e-7 * f;
        ensure(doc >= -tol && doc <= call + tol, || format!("DOC {doc} vs call {call}"))?;
        ensure(uop >= -tol && uop <= put + tol, || format!("UOP {uop} vs put {put}"))?;
        ensure(dko >= -tol && dko <= doc + tol, || format!("DKO {dko} vs DOC {doc}"))?;
        Ok(())
    }))
}

/// Identical seed and configuration give bit-identical estimates.
pub fn mc_determinism(cases: u32) -> Result<(), String> {
    let s = (clock(), any::<u64>(), 0.6f64..0.95);
    report(runner(cases).run(&s, |(spec, seed, lo)| {
        let m = market();
        let c = BarrierContract::doc(100.0, lo * m.forward(0.5), 0.5);
        let cfg = McConfig { n_paths: 512, n_steps_per_year: 104, seed, antithetic: false, block_size: 128, bridge: true };
        let a = lift(price_barrier_mc_rho0(&c, &m, &spec, &cfg))?;
        let b = lift(price_barrier_mc_rho0(&c, &m, &spec, &cfg))?;
        ensure(a.price.to_bits() == b.price.to_bits() && a.standard_error.to_bits() == b.standard_error.to_bits(), || {
            format!("{a:?} vs {b:?}")
        })
    }))
}
