use std::sync::Arc;

use bonus_malus::{
    estimate_value, iterate, Class, Control, Grid64, GridSpec64, Init, Params, Policy, StopRule,
};

const GAMMA: f64 = 0.5;

/// Value of never reporting from `(class, 0, 0, x)` under Table 1: the claim
/// total is compound Poisson and independent of the class path, so the
/// value is `-exp(-γ(x + drift) + λT(E[e^{γY}] - 1))`.
fn never_report_exact(class: Class, x: f64) -> f64 {
    let p = Params::table1();
    let drift = match class {
        Class::One => p.drift_integral(Class::One, 0.0, 5.0).unwrap(),
        Class::Two => p.drift_integral(Class::Two, 0.0, 2.0).unwrap() + p.drift_integral(Class::One, 0.0, 3.0).unwrap(),
    };
    let mgf = 1.0 / (1.0 - GAMMA);
    -(-GAMMA * (x + drift) + 5.0 * (mgf - 1.0)).exp()
}

#[test]
fn never_reporting_matches_its_closed_form() {
    let p = Params::table1();
    let g = Arc::new(Grid64::build(&p, &GridSpec64::default()).unwrap());
    let r = iterate(&p, g.clone(), &Control::fixed(f64::INFINITY)).unwrap();
    for class in Class::ALL {
        for x in [0.0, 2.5, 5.0] {
            let exact = never_report_exact(class, x);
            let v = r.value.interp(class, 0.0, 0.0, x).unwrap();
            // first-order scheme: within 10% at h = 0.05
            assert!((v - exact).abs() <= 0.1 * exact.abs(), "{class} x {x}: {v} vs {exact}");
        }
    }
}

/// Without reporting, `Var h(X_T)` involves `E[e^{ΣY}]`, which is infinite
/// for unit exponential claims, so the sample mean is not within a few
/// standard errors of the truth with any reliability. The solver is checked
/// to be closer to the exact value than the Monte Carlo mean is.
#[test]
fn never_reporting_solver_beats_monte_carlo_against_exact() {
    let p = Params::table1();
    let g = Arc::new(Grid64::build(&p, &GridSpec64::default()).unwrap());
    let control = Control::fixed(f64::INFINITY).with_stop(StopRule::FixedIterations(20));
    let r = iterate(&p, g.clone(), &control).unwrap();
    let v = r.value.interp(Class::One, 0.0, 0.0, 2.5).unwrap();
    let mc = estimate_value(&p, &Policy::Constant(f64::INFINITY), Init::new(Class::One, 0.0, 0.0, 2.5), 100_000, 1).unwrap();
    let exact = never_report_exact(Class::One, 2.5);
    let solver_gap = (v - exact).abs();
    let mc_gap = (mc.mean - exact).abs();
    println!("exact {exact} solver {v} mc {} ± {}", mc.mean, mc.stderr);
    assert!(solver_gap < mc_gap, "solver {v} mc {} exact {exact}", mc.mean);
}

#[test]
fn reporting_policies_match_monte_carlo() {
    let p = Params::table1();
    let g = Arc::new(Grid64::build(&p, &GridSpec64::default()).unwrap());
    for b in [0.0, 1.0] {
        let r = iterate(&p, g.clone(), &Control::fixed(b)).unwrap();
        for class in Class::ALL {
            let v = r.value.interp(class, 0.0, 0.0, 2.5).unwrap();
            let mc = estimate_value(&p, &Policy::Constant(b), Init::new(class, 0.0, 0.0, 2.5), 100_000, 1).unwrap();
            assert!((v - mc.mean).abs() <= 3.0 * mc.stderr + 0.02, "b {b} {class}: {v} vs {mc:?}");
        }
    }
}

#[test]
fn disjoint_seeds_agree() {
    let p = Params::table1();
    let init = Init::new(Class::One, 0.0, 0.0, 2.5);
    let a = estimate_value(&p, &Policy::Constant(f64::INFINITY), init, 100_000, 1).unwrap();
    let b = estimate_value(&p, &Policy::Constant(f64::INFINITY), init, 100_000, 2).unwrap();
    assert!((a.mean - b.mean).abs() <= 3.0 * (a.stderr + b.stderr), "{a:?} {b:?}");
}
