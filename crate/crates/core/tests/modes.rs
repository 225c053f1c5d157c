mod common;

use std::sync::Arc;

use bishadow::charts::PNorm;
use bishadow::engine::{solve_infinite, EngineError, SolveOptions};
use bishadow::hyperbolicity::{shadowing_constants, HyperbolicityError, ModeSpec};
use bishadow::pseudoorbit::PseudoOrbit;
use bishadow::systems::{make_scalar_family, IndexProfile, MapFamily, PerturbedFamily, Window};
use bishadow::verify::{check_asymptotic_rate, check_limit_decay};
use common::{cat_case, Case};

fn band_max(distances: &[f64], w: Window, lo: usize, hi: usize) -> f64 {
    w.indices()
        .zip(distances)
        .filter(|(i, _)| (lo..=hi).contains(&(i.unsigned_abs() as usize)))
        .map(|(_, d)| *d)
        .fold(0.0, f64::max)
}

fn alternating_scalar(k: usize, c: f64) -> Case {
    let w = Window::new(k);
    let f: Arc<dyn MapFamily> = Arc::new(make_scalar_family(2.0, 1e3, 1.0, w));
    let points = w
        .indices()
        .map(|i| f.chart().point_from_slice(&[if i % 2 == 0 { c } else { -c }]).unwrap())
        .collect();
    let orbit = PseudoOrbit::from_points(f.as_ref(), w, points).unwrap();
    let g = PerturbedFamily::unperturbed(f.clone());
    Case::new(f, g, orbit, ModeSpec::Finite, None)
}

#[test]
fn scalar_boundary_influence_halves_per_step() {
    // x_i = (-1)^i c: the shadow is pinned at y_k = x_k and halves backward
    let c = 1e-4;
    let mut y0 = Vec::new();
    for k in [20, 40] {
        let case = alternating_scalar(k, c);
        let res = case.problem(PNorm::Infinity).solve_finite().unwrap();
        let y = res.orbit[res.window.position(0)].as_slice()[0];
        // the iteration stops once changes drop below tol = 1e-12
        assert!((y - c * 0.5_f64.powi(k as i32)).abs() <= 1e-12);
        y0.push(y);
    }
    let case = alternating_scalar(40, c);
    let ld = case.constants.l * case.constants.delta;
    assert!((y0[0] - y0[1]).abs() <= 0.5_f64.powi(20) * ld);
}

#[test]
fn doubling_windows_agree_in_the_center() {
    let size = IndexProfile::Constant { magnitude: 1e-3 };
    let a = cat_case(64, size, IndexProfile::zero(), ModeSpec::Finite, None, 9);
    let b = cat_case(128, size, IndexProfile::zero(), ModeSpec::Finite, None, 9);
    // same seed and start: the 64-window is not a sub-window of the 128 one,
    // so restrict the larger orbit instead
    let sub = b.orbit.restrict(Window::new(64)).unwrap();
    let split = b.splitting.restrict(Window::new(64)).unwrap();
    let small = bishadow::engine::ShadowProblem::new(b.f.as_ref(), &b.g, &sub, &split, b.tilde, b.constants, SolveOptions::default())
        .unwrap()
        .solve_finite()
        .unwrap();
    let large = b.problem(PNorm::Infinity).solve_finite().unwrap();
    let chart = b.f.chart();
    let mut worst = 0.0_f64;
    for i in -32..=32 {
        let y1 = &small.orbit[small.window.position(i)];
        let y2 = &large.orbit[large.window.position(i)];
        worst = worst.max(chart.distance(y1, y2).unwrap());
    }
    assert!(worst <= 1e-8, "{worst}");
    assert!(a.problem(PNorm::Infinity).solve_finite().is_ok());
}

#[test]
fn central_change_decreases_under_doubling() {
    let size = IndexProfile::Constant { magnitude: 1e-3 };
    let case = cat_case(128, size, IndexProfile::zero(), ModeSpec::Finite, None, 4);
    let opts = SolveOptions {
        agreement_tol: 1e-12,
        max_window: 64,
        ..SolveOptions::default()
    };
    let err = solve_infinite(case.f.as_ref(), &case.g, &case.orbit, &case.splitting, case.tilde, case.constants, 4, opts).unwrap_err();
    assert!(matches!(err, EngineError::ScheduleExhausted { max_window: 64, .. }), "{err}");
    let opts = SolveOptions::default();
    let res = solve_infinite(case.f.as_ref(), &case.g, &case.orbit, &case.splitting, case.tilde, case.constants, 4, opts).unwrap();
    let changes: Vec<f64> = res.schedule.as_ref().unwrap().iter().filter_map(|s| s.central_change).collect();
    assert!(changes.windows(2).all(|w| w[1] < w[0]), "{changes:?}");
    assert!(*changes.last().unwrap() <= 1e-8);
    assert!(res.achieved_norm <= res.bound + 1e-12);
}

#[test]
fn harmonic_defects_satisfy_every_band() {
    let size = IndexProfile::Harmonic { magnitude: 1e-3 };
    let case = cat_case(200, size, size, ModeSpec::Limit, None, 5);
    let res = case.problem(PNorm::Infinity).solve_limit().unwrap();
    let report = res.limit.as_ref().unwrap();
    assert!(report.pass);
    assert!(report.bands.len() >= 6);
    let w = res.window;
    assert!(band_max(&res.distances, w, 150, 200) <= 0.5 * band_max(&res.distances, w, 50, 100));
    let again = check_limit_decay(&res.distances, &res.defects, &res.gaps, w, res.l, res.delta);
    assert_eq!(&again, report);
}

#[test]
fn limit_mode_on_true_orbit_and_geometric_defects() {
    let case = cat_case(40, IndexProfile::zero(), IndexProfile::zero(), ModeSpec::Limit, None, 5);
    let res = case.problem(PNorm::Infinity).solve_limit().unwrap();
    assert!(res.distances.iter().all(|&d| d == 0.0));
    let geo = IndexProfile::Geometric { magnitude: 1e-3, rate: 0.5 };
    let case = cat_case(40, geo, IndexProfile::zero(), ModeSpec::Limit, None, 5);
    assert!(case.problem(PNorm::Infinity).solve_limit().unwrap().limit.unwrap().pass);
}

#[test]
fn geometric_defects_decay_at_the_rate() {
    let geo = IndexProfile::Geometric { magnitude: 1e-2, rate: 0.5 };
    let mode = ModeSpec::Asymptotic { v: 0.5, epsilon: 0.1 };
    let case = cat_case(60, geo, IndexProfile::zero(), mode, Some(0.01), 6);
    let res = case.problem(PNorm::Infinity).solve_asymptotic(None).unwrap();
    let rate = res.rate.as_ref().unwrap();
    assert_eq!((rate.k0, rate.k1), (0, 10));
    assert!(rate.distance_rate <= 0.6 + 1e-9);
    let ld = res.l * res.delta;
    for (i, d) in res.window.indices().zip(&res.distances) {
        let a = i.unsigned_abs() as i32;
        if a >= 10 {
            assert!(*d <= 2.0 * ld * 0.6_f64.powi(a - 10));
        }
    }
    assert!(check_asymptotic_rate(&res.distances, -60, 0.5, 0.1, rate.k1).unwrap().pass);
}

#[test]
fn zero_defects_have_zero_rate() {
    let mode = ModeSpec::Asymptotic { v: 0.5, epsilon: 0.1 };
    let case = cat_case(40, IndexProfile::zero(), IndexProfile::zero(), mode, None, 6);
    let res = case.problem(PNorm::Infinity).solve_asymptotic(None).unwrap();
    assert_eq!(res.rate.unwrap().distance_rate, 0.0);
}

#[test]
fn slow_defects_fail_the_asymptotic_precondition() {
    let geo = IndexProfile::Geometric { magnitude: 1e-3, rate: 0.8 };
    let mode = ModeSpec::Asymptotic { v: 0.5, epsilon: 0.1 };
    let case = cat_case(60, geo, IndexProfile::zero(), mode, None, 6);
    let err = case.problem(PNorm::Infinity).solve_asymptotic(None).unwrap_err();
    assert!(matches!(err, EngineError::Precondition(_)), "{err}");
}

#[test]
fn small_rates_are_infeasible() {
    let case = cat_case(10, IndexProfile::zero(), IndexProfile::zero(), ModeSpec::Finite, None, 6);
    let err = shadowing_constants(&case.tilde, 0.5, ModeSpec::Asymptotic { v: 0.2, epsilon: 0.1 }, None).unwrap_err();
    match err {
        HyperbolicityError::Infeasible { denominator, feasible_v, .. } => {
            assert_eq!(denominator, "lambda_u - mu_u - (v + epsilon)^-1");
            let (lo, hi) = feasible_v.unwrap();
            assert!(lo < 0.5 && hi == 0.9);
        }
        other => panic!("{other}"),
    }
}
