use approx::assert_relative_eq;
use clockbarrier::barrier::{price_doc, price_uop, spec_phi};
use clockbarrier::clock::{CirClock, ClockSpec, MarkovSwitchingClock, SquaredOuClock};
use clockbarrier::numerics::quad::QuadratureConfig;
use clockbarrier::vanilla::*;
use clockbarrier::{BarrierContract, MarketEnv};
use num_complex::Complex64;

fn r1() -> ClockSpec {
    ClockSpec::Cir(CirClock::new(0.6, 0.2, 0.4, 0.18))
}

fn market() -> MarketEnv {
    MarketEnv::new(100.0, 0.03, 0.01)
}

#[test]
fn char_fn_basic_properties() {
    let specs = vec![
        r1(),
        ClockSpec::SquaredOu(SquaredOuClock { alpha: 0.6, sigma: 0.49, y0: 0.42 }),
        ClockSpec::MarkovSwitching(MarkovSwitchingClock {
            generator: vec![vec![-1.0, 1.0], vec![2.0, -2.0]],
            levels: vec![0.05, 0.4],
            initial_dist: vec![0.5, 0.5],
        }),
    ];
    let m = market();
    for s in &specs {
        let z = char_fn(s, &m, 1.0, 0.0).unwrap();
        assert_relative_eq!(z.re, 1.0, max_relative = 1e-15);
        for u in [0.3, 1.0, 5.0, 20.0, 80.0] {
            assert!(char_fn(s, &m, 1.0, u).unwrap().norm() <= 1.0 + 1e-12);
        }
        let mart = char_fn_complex(s, &m, 1.0, Complex64::new(0.0, -1.0)).unwrap();
        assert_relative_eq!(mart.re, m.forward(1.0), max_relative = 1e-8);
        assert!(mart.im.abs() < 1e-8 * m.forward(1.0));
    }
}

#[test]
fn near_deterministic_clock_reproduces_black() {
    let c = CirClock::new(0.6, 0.2, 1e-8, 0.18);
    let spec = ClockSpec::Cir(c);
    let m = market();
    for t in [0.25, 1.0, 3.0] {
        let g = c.expected_clock(t);
        for k in [60.0, 90.0, 100.0, 115.0, 160.0] {
            for kind in [OptionKind::Call, OptionKind::Put] {
                let cos = cos_price(&spec, &m, t, k, kind).unwrap();
                let bl = black_price(m.forward(t), k, g, m.discount(t), kind);
                assert!((cos - bl).abs() < 1e-8 * m.spot, "T={t} K={k} {kind:?}: {cos} vs {bl}");
            }
        }
    }
}

#[test]
fn cos_respects_arbitrage_bounds_and_parity() {
    let m = market();
    let spec = r1();
    let t = 1.0;
    let c = cos_price(&spec, &m, t, 100.0, OptionKind::Call).unwrap();
    let p = cos_price(&spec, &m, t, 100.0, OptionKind::Put).unwrap();
    assert!(c >= 0.0 && c <= m.forward(t) * m.discount(t));
    assert_relative_eq!(c - p, m.discount(t) * (m.forward(t) - 100.0), max_relative = 1e-10);
}

#[test]
fn cos_is_stable_under_doubling() {
    let m = market();
    let spec = r1();
    let a = CosTable::new(&spec, &m, 0.5, 512).unwrap();
    let b = CosTable::new(&spec, &m, 0.5, 1024).unwrap();
    for k in [70.0, 100.0, 130.0] {
        assert!((a.put(k) - b.put(k)).abs() < 1e-8);
    }
}

#[test]
fn implied_vol_round_trip_and_band() {
    let m = market();
    let p = black_price(m.forward(1.0), 105.0, 0.04, m.discount(1.0), OptionKind::Call);
    let v = implied_vol(p, &m, 1.0, 105.0, OptionKind::Call).unwrap();
    assert!((v - 0.2).abs() < 1e-10);
    let intrinsic = m.discount(1.0) * (m.forward(1.0) - 80.0);
    assert!(implied_vol(intrinsic, &m, 1.0, 80.0, OptionKind::Call).is_err());
    let ladder: Vec<f64> = (1..=10).map(|i| 2.0 + i as f64).collect();
    let vols: Vec<f64> = ladder.iter().map(|&p| implied_vol(p, &m, 1.0, 100.0, OptionKind::Put).unwrap()).collect();
    assert!(vols.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn variance_swap_closed_forms() {
    let c = CirClock::new(0.6, 0.2, 0.4, 0.18);
    let t: f64 = 2.0;
    let expect = c.theta + (c.v0 - c.theta) * (1.0 - (-c.kappa * t).exp()) / (c.kappa * t);
    assert_relative_eq!(variance_swap_strike(&ClockSpec::Cir(c), t).unwrap(), expect, max_relative = 1e-14);
    let flat = ClockSpec::Cir(CirClock::new(0.6, 0.2, 0.4, 0.2));
    for t in [0.1, 1.0, 10.0] {
        assert_relative_eq!(variance_swap_strike(&flat, t).unwrap(), 0.2, max_relative = 1e-13);
    }
    assert!((variance_swap_strike(&ClockSpec::Cir(c), 1e-6).unwrap() - 0.18).abs() < 1e-4);
}

#[test]
fn uop_with_remote_barrier_matches_cos_put() {
    let m = MarketEnv::new(100.0, 0.03, 0.0);
    let spec = r1();
    let cfg = QuadratureConfig::default();
    for t in [0.25, 1.0] {
        let c = BarrierContract::uop(100.0, 1000.0, t);
        let b = price_uop(&c, &m, &spec_phi(&spec, t), &cfg).unwrap();
        let v = cos_price(&spec, &m, t, 100.0, OptionKind::Put).unwrap();
        assert!((b - v).abs() / v < 1e-3, "{b} vs {v}");
        assert!(b <= v + 1e-8);
    }
}

#[test]
fn doc_with_remote_barrier_matches_cos_call() {
    let m = MarketEnv::new(100.0, 0.03, 0.0);
    let spec = r1();
    let cfg = QuadratureConfig::default();
    for t in [0.25, 1.0] {
        let c = BarrierContract::doc(100.0, 10.0, t);
        let b = price_doc(&c, &m, &spec_phi(&spec, t), &cfg).unwrap();
        let v = cos_price(&spec, &m, t, 100.0, OptionKind::Call).unwrap();
        assert!((b - v).abs() / v < 1e-3, "{b} vs {v}");
        assert!(b <= v + 1e-8);
    }
}
