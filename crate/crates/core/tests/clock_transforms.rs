use approx::assert_relative_eq;
use clockbarrier::clock::*;
use clockbarrier::numerics::expm::expm;
use clockbarrier::numerics::quad;
use nalgebra::DMatrix;
use num_complex::Complex64;

fn regime1() -> CirClock {
    CirClock::new(0.6, 0.20, 0.4, 0.18)
}

#[test]
fn phi_at_zero_is_one_for_every_family() {
    let specs = vec![
        ClockSpec::Cir(regime1()),
        ClockSpec::SquaredOu(SquaredOuClock { alpha: 0.6, sigma: 0.49, y0: 0.18f64.sqrt() }),
        ClockSpec::TimeDepCir(TimeDepCirClock {
            breakpoints: vec![0.5, 2.0],
            kappa: vec![0.6, 1.0],
            theta: vec![0.2, 0.3],
            xi: vec![0.4, 0.5],
            v0: 0.18,
        }),
        ClockSpec::MarkovSwitching(MarkovSwitchingClock {
            generator: vec![vec![-1.0, 1.0], vec![2.0, -2.0]],
            levels: vec![0.1, 0.5],
            initial_dist: vec![0.3, 0.7],
        }),
    ];
    for s in &specs {
        for t in [0.25, 1.0, 2.0] {
            assert_eq!(s.phi(t, 0.0).unwrap(), 1.0);
        }
    }
}

#[test]
fn closed_form_matches_numeric_riccati() {
    let c = regime1();
    let spec = ClockSpec::Cir(c);
    for t in [0.25, 1.0, 5.0] {
        for lambda in [0.0, 0.01, 0.3, 1.0, 4.0, 17.0, 60.0, 150.0, 500.0] {
            let a = phi_cir_closed_form(&c, t, lambda).unwrap();
            let b = phi_riccati_numeric(&spec, t, lambda).unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }
}

#[test]
fn deterministic_limit_fixes_riccati_sign() {
    let c = CirClock::new(0.6, 0.20, 1e-6, 0.18);
    let t: f64 = 1.0;
    // E[Gamma] by quadrature of the mean-variance curve.
    let g = quad::integrate(|s| c.theta + (c.v0 - c.theta) * (-c.kappa * s).exp(), 0.0, t, 1e-14, 1e-16, 100)
        .unwrap()
        .value;
    let phi = phi_cir_closed_form(&c, t, 2.0).unwrap();
    assert_relative_eq!(phi, (-2.0 * g).exp(), max_relative = 1e-6);
    let num = phi_riccati_numeric(&ClockSpec::Cir(c), t, 2.0).unwrap();
    assert_relative_eq!(num, (-2.0 * g).exp(), max_relative = 1e-6);
}

#[test]
fn piecewise_identical_segments_equal_single_segment() {
    let single = ClockSpec::TimeDepCir(TimeDepCirClock {
        breakpoints: vec![1.0],
        kappa: vec![0.6],
        theta: vec![0.2],
        xi: vec![0.4],
        v0: 0.18,
    });
    let split = ClockSpec::TimeDepCir(TimeDepCirClock {
        breakpoints: vec![0.37, 1.0],
        kappa: vec![0.6, 0.6],
        theta: vec![0.2, 0.2],
        xi: vec![0.4, 0.4],
        v0: 0.18,
    });
    for lambda in [0.5, 3.0, 40.0] {
        let a = phi_riccati_numeric(&single, 1.0, lambda).unwrap();
        let b = phi_riccati_numeric(&split, 1.0, lambda).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-10);
    }
}

#[test]
fn time_dependent_deterministic_limit_uses_calendar_coefficients() {
    // Two segments with different theta: in the deterministic limit the clock
    // equals the integral of the piecewise mean curve.
    let c = TimeDepCirClock {
        breakpoints: vec![0.3, 1.0],
        kappa: vec![2.0, 0.5],
        theta: vec![0.1, 0.4],
        xi: vec![1e-6, 1e-6],
        v0: 0.2,
    };
    let g = c.expected_clock(1.0);
    let phi = phi_riccati_numeric(&ClockSpec::TimeDepCir(c.clone()), 1.0, 1.5).unwrap();
    assert_relative_eq!(phi, (-1.5 * g).exp(), max_relative = 1e-8);
    let g_quad = quad::integrate(|s| c.mean_variance(s), 0.0, 1.0, 1e-13, 1e-15, 200).unwrap().value;
    assert_relative_eq!(g, g_quad, max_relative = 1e-10);
}

#[test]
fn squared_ou_numeric_matches_closed_riccati() {
    let c = SquaredOuClock { alpha: 0.6, sigma: 0.49, y0: 0.18f64.sqrt() };
    let spec = ClockSpec::SquaredOu(c);
    for t in [0.25, 1.0, 3.0] {
        for lambda in [0.1, 1.0, 10.0, 200.0] {
            let (a, b) = spec.riccati_ab(t, lambda).unwrap();
            let closed = (-a - b * c.y0 * c.y0).exp();
            assert_relative_eq!(phi_squared_ou(&c, t, lambda).unwrap(), closed, max_relative = 1e-9);
        }
    }
}

#[test]
fn squared_ou_deterministic_limit() {
    let c = SquaredOuClock { alpha: 0.6, sigma: 1e-7, y0: 0.4 };
    let g = c.y0 * c.y0 * (1.0 - (-2.0 * c.alpha).exp()) / (2.0 * c.alpha);
    assert_relative_eq!(phi_squared_ou(&c, 1.0, 3.0).unwrap(), (-3.0 * g).exp(), max_relative = 1e-8);
}

#[test]
fn markov_single_state_is_exponential() {
    let c = MarkovSwitchingClock { generator: vec![vec![0.0]], levels: vec![0.3], initial_dist: vec![1.0] };
    for lambda in [0.0, 0.5, 4.0] {
        assert_relative_eq!(phi_markov_switching(&c, 2.0, lambda).unwrap(), (-lambda * 0.3 * 2.0).exp(), max_relative = 1e-13);
    }
}

#[test]
fn markov_rejects_dimension_mismatch() {
    let c = MarkovSwitchingClock {
        generator: vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
        levels: vec![0.3],
        initial_dist: vec![1.0],
    };
    assert!(matches!(phi_markov_switching(&c, 1.0, 1.0), Err(clockbarrier::Error::Dimension(_))));
}

#[test]
fn expm_agrees_with_nalgebra() {
    let a: DMatrix<f64> = DMatrix::from_row_slice(3, 3, &[-2.0, 1.5, 0.5, 0.3, -0.8, 0.5, 1.0, 2.0, -3.0]);
    for s in [0.1, 1.0, 7.0, 40.0] {
        let ours: DMatrix<f64> = expm(&(a.clone() * s)).unwrap();
        let theirs = (a.clone() * s).exp();
        for (x, y) in ours.iter().zip(theirs.iter()) {
            let (x, y): (f64, f64) = (*x, *y);
            assert!((x - y).abs() <= 1e-11 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn domain_errors() {
    let c = regime1();
    assert!(phi_cir_closed_form(&c, 1.0, -1.0).is_err());
    assert!(phi_cir_closed_form(&c, 0.0, 1.0).is_err());
    assert!(phi_cir_closed_form(&c, -1.0, 1.0).is_err());
}

#[test]
fn conditional_at_t0_matches_unconditional() {
    let c = regime1();
    let spec = ClockSpec::Cir(c);
    for lambda in [0.2, 2.0, 30.0] {
        let cond = phi_conditional(&spec, 0.0, 1.0, lambda, 0.18).unwrap();
        assert_relative_eq!(cond.phi, phi_cir_closed_form(&c, 1.0, lambda).unwrap(), max_relative = 1e-14);
    }
}

#[test]
fn conditional_near_maturity_is_trivial() {
    let spec = ClockSpec::Cir(regime1());
    let cond = phi_conditional(&spec, 1.0 - 1e-12, 1.0, 5.0, 0.3).unwrap();
    assert!((cond.phi - 1.0).abs() < 1e-10);
    assert!(cond.dphi_dy.unwrap().abs() < 1e-10);
}

#[test]
fn state_derivative_matches_finite_differences() {
    let specs = vec![
        ClockSpec::Cir(regime1()),
        ClockSpec::SquaredOu(SquaredOuClock { alpha: 0.6, sigma: 0.49, y0: 0.42 }),
        ClockSpec::TimeDepCir(TimeDepCirClock {
            breakpoints: vec![0.5, 1.0],
            kappa: vec![0.6, 1.2],
            theta: vec![0.2, 0.3],
            xi: vec![0.4, 0.6],
            v0: 0.18,
        }),
    ];
    for spec in &specs {
        for &y in &[0.05, 0.18, 0.7] {
            for &lambda in &[0.1, 1.0, 10.0, 100.0] {
                let c = phi_conditional(spec, 0.2, 1.0, lambda, y).unwrap();
                let h = 1e-5 * y.abs().max(1.0);
                let up = phi_conditional(spec, 0.2, 1.0, lambda, y + h).unwrap().phi;
                let dn = phi_conditional(spec, 0.2, 1.0, lambda, y - h).unwrap().phi;
                let fd = (up - dn) / (2.0 * h);
                let an = c.dphi_dy.unwrap();
                assert!((an - fd).abs() <= 1e-6 * an.abs().max(1e-300), "{} y={y} l={lambda}: {an} vs {fd}", spec.family());
                assert!(an < 0.0, "increasing the variance state lowers the transform");
            }
        }
    }
}

#[test]
fn markov_conditional_has_no_derivative() {
    let spec = ClockSpec::MarkovSwitching(MarkovSwitchingClock {
        generator: vec![vec![-1.0, 1.0], vec![2.0, -2.0]],
        levels: vec![0.1, 0.5],
        initial_dist: vec![0.3, 0.7],
    });
    let c = phi_conditional(&spec, 0.0, 1.0, 1.0, 1.0).unwrap();
    assert!(c.dphi_dy.is_none());
    assert!(c.phi > 0.0 && c.phi < 1.0);
}

#[test]
fn dirichlet_grid_cache_is_monotone_and_deterministic() {
    let a = (130.0f64 / 70.0).ln();
    let grid: Vec<f64> = (1..=200)
        .map(|n| {
            let w = n as f64 * std::f64::consts::PI / a;
            0.5 * (w * w + 0.25)
        })
        .collect();
    let spec = ClockSpec::Cir(regime1());
    let c1 = build_transform_cache(&spec, 0.0, 1.0, &grid, None).unwrap();
    let c2 = build_transform_cache(&spec, 0.0, 1.0, &grid, None).unwrap();
    assert_eq!(c1.len(), 200);
    assert!(c1.values().windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(c1.log_values.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), c2.log_values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(c1.key, c2.key);
    assert!(c1.matches(&spec, 0.0, 1.0));
    assert_eq!(c1.lookup(grid[7]), Some(c1.phi(7)));
}

#[test]
fn cache_rejects_unsorted_grid() {
    let spec = ClockSpec::Cir(regime1());
    assert!(build_transform_cache(&spec, 0.0, 1.0, &[1.0, 0.5], None).is_err());
    assert!(build_transform_cache(&spec, 0.0, 1.0, &[0.0, 0.5], None).is_err());
}

#[test]
fn digest_rounds_to_fifteen_digits() {
    let a = ClockSpec::Cir(CirClock::new(0.6, 0.2, 0.4, 0.18));
    let b = ClockSpec::Cir(CirClock::new(0.6 + 1e-17, 0.2, 0.4, 0.18));
    let c = ClockSpec::Cir(CirClock::new(0.6 + 1e-9, 0.2, 0.4, 0.18));
    assert_eq!(a.digest(), b.digest());
    assert_ne!(a.digest(), c.digest());
}

#[test]
fn complex_continuation_agrees_on_real_axis() {
    let specs = vec![
        ClockSpec::Cir(regime1()),
        ClockSpec::SquaredOu(SquaredOuClock { alpha: 0.6, sigma: 0.49, y0: 0.42 }),
        ClockSpec::MarkovSwitching(MarkovSwitchingClock {
            generator: vec![vec![-1.0, 1.0], vec![2.0, -2.0]],
            levels: vec![0.1, 0.5],
            initial_dist: vec![0.3, 0.7],
        }),
    ];
    for s in &specs {
        for lambda in [0.3, 5.0] {
            let z = s.log_phi_complex(1.0, Complex64::new(lambda, 0.0)).unwrap();
            assert_relative_eq!(z.re, s.log_phi(1.0, lambda).unwrap(), max_relative = 1e-9);
            assert!(z.im.abs() < 1e-12);
        }
    }
}

#[test]
fn two_factor_factorizes() {
    let fast = CirClock::new(4.0, 0.1, 0.5, 0.1);
    let slow = CirClock::new(0.3, 0.1, 0.3, 0.08);
    let spec = ClockSpec::TwoFactorCir(TwoFactorCirClock { weight: 0.4, fast, slow });
    let direct = spec.phi(1.0, 2.0).unwrap();
    let prod = phi_cir_closed_form(&fast, 1.0, 0.8).unwrap() * phi_cir_closed_form(&slow, 1.0, 1.2).unwrap();
    assert_relative_eq!(direct, prod, max_relative = 1e-14);
}
