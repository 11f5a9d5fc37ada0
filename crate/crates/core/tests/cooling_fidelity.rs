//! Cross-oracle fidelity checks on the cooling model: the Laplace
//! evaluation against the exact marginal posterior, pointwise over the
//! benchmark lattice, and the Euler refinement pattern.

use nalgebra::DVector;
use odelap_core::laplace::{laplace_eval, laplace_eval_with, OptimOpts, PriorSpec, ThetaPrior};
use odelap_core::models;
use odelap_core::ode::{Method, TimeGrid};
use odelap_core::sensitivity::OdeTrajectory;
use odelap_core::Dataset;

fn cooling_setup() -> (models::ModelCatalogEntry, Dataset, PriorSpec) {
    let entry = models::newton_cooling();
    let data = models::simulate_data(
        &entry,
        &entry.theta_true,
        &entry.x1_true,
        entry.sigma2_true,
        &entry.default_times,
        100,
        2024,
        false,
    )
    .unwrap();
    let prior = PriorSpec::new(
        entry.a,
        entry.b,
        entry.c,
        data.first_observation(),
        ThetaPrior::Box(entry.system.theta_support.clone()),
    )
    .unwrap();
    (entry, data, prior)
}

/// 51x51 theta lattice over the region the benchmark study gridded.
fn theta_lattice() -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(51 * 51);
    for i in 0..51 {
        let t1 = -0.9 + 0.7 * i as f64 / 50.0; // theta1 in [-0.9, -0.2]
        for j in 0..51 {
            let t2 = 75.0 + 10.0 * j as f64 / 50.0; // theta2 in [75, 85]
            out.push(DVector::from_vec(vec![t1, t2]));
        }
    }
    out
}

/// Max pointwise gap between two log-posterior surfaces after aligning
/// both at their (finite) maximum.
fn max_aligned_gap(a: &[f64], b: &[f64]) -> f64 {
    let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bmax = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| ((x - amax) - (y - bmax)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn laplace_rk4_m4_matches_exact_posterior_within_tolerance() {
    let (entry, data, prior) = cooling_setup();
    let grid = TimeGrid::new(entry.default_times.clone(), 4).unwrap();
    let lattice = theta_lattice();
    let mut lap = Vec::with_capacity(lattice.len());
    let mut exact = Vec::with_capacity(lattice.len());
    for theta in &lattice {
        lap.push(laplace_eval(&entry.system, theta, &data, &prior, &grid, Method::Rk4).log_post);
        exact.push(models::cooling_exact_posterior(theta, &data, &prior).unwrap());
    }
    let gap = max_aligned_gap(&lap, &exact);
    assert!(gap <= 0.02, "max aligned deviation {gap} over 51x51 lattice");
}

#[test]
fn laplace_rk4_m1_profile_tracks_exact_on_mass_significant_region() {
    // At m = 1 the integration error grows with |theta1|, so the pointwise
    // bound is checked where the exact posterior carries mass above the
    // range-finding threshold (1e-5 of the mode); measured 0.050 on the
    // documented seed (summaries agree far tighter, see the acceptance
    // suite).
    let (entry, data, prior) = cooling_setup();
    let grid = TimeGrid::new(entry.default_times.clone(), 1).unwrap();
    let lattice = theta_lattice();
    let mut lap = Vec::with_capacity(lattice.len());
    let mut exact = Vec::with_capacity(lattice.len());
    for theta in &lattice {
        lap.push(laplace_eval(&entry.system, theta, &data, &prior, &grid, Method::Rk4).log_post);
        exact.push(models::cooling_exact_posterior(theta, &data, &prior).unwrap());
    }
    let ex_max = exact.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lap_max = lap.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gap = lap
        .iter()
        .zip(&exact)
        .filter(|(l, e)| l.is_finite() && (*e - ex_max).exp() >= 1e-5)
        .map(|(l, e)| ((l - lap_max) - (e - ex_max)).abs())
        .fold(0.0, f64::max);
    assert!(gap <= 0.06, "max aligned deviation {gap} at m = 1");
}

#[test]
fn closed_form_source_reproduces_exact_posterior_pointwise() {
    // With the analytic trajectory substituted, the Laplace step is exact:
    // the two surfaces differ by one constant to near machine precision.
    let (_entry, data, prior) = cooling_setup();
    let grid = TimeGrid::new(models::newton_cooling().default_times, 1).unwrap();
    let source = models::CoolingClosedForm;
    let opts = OptimOpts::default();
    let lattice = theta_lattice();
    let mut lap = Vec::with_capacity(lattice.len());
    let mut exact = Vec::with_capacity(lattice.len());
    for theta in &lattice {
        lap.push(laplace_eval_with(&source, theta, &data, &prior, &grid, &opts, None).log_post);
        exact.push(models::cooling_exact_posterior(theta, &data, &prior).unwrap());
    }
    let gap = max_aligned_gap(&lap, &exact);
    assert!(gap <= 1e-7, "closed-form LAP vs exact: max aligned gap {gap}");
}

#[test]
fn euler_deviation_decreases_with_m_and_rk4_is_tight_at_m1() {
    // Theorem-1-style pattern: pointwise deviation from the exact surface
    // (mode-aligned) shrinks as m grows for Euler and is already small at
    // m = 1 for RK4.
    let (entry, data, prior) = cooling_setup();
    let lattice = theta_lattice();
    let exact: Vec<f64> = lattice
        .iter()
        .map(|theta| models::cooling_exact_posterior(theta, &data, &prior).unwrap())
        .collect();
    let gap_at = |method: Method, m: usize| -> f64 {
        let grid = TimeGrid::new(entry.default_times.clone(), m).unwrap();
        let lap: Vec<f64> = lattice
            .iter()
            .map(|theta| {
                laplace_eval(&entry.system, theta, &data, &prior, &grid, method).log_post
            })
            .collect();
        max_aligned_gap(&lap, &exact)
    };
    let euler: Vec<f64> = [1usize, 4, 16, 50].iter().map(|&m| gap_at(Method::Euler, m)).collect();
    for w in euler.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-6,
            "euler deviation did not decrease: {euler:?}"
        );
    }
    assert!(euler[0] > euler[3], "refinement had no effect: {euler:?}");
    let rk4_m1 = gap_at(Method::Rk4, 1);
    let euler_m1 = euler[0];
    assert!(rk4_m1 <= 0.06, "rk4 m=1 deviation {rk4_m1}");
    assert!(
        rk4_m1 < 0.2 * euler_m1,
        "rk4 m=1 ({rk4_m1}) should beat euler m=1 ({euler_m1}) by far"
    );
}

#[test]
fn warm_start_does_not_change_results() {
    // Warm-starting is a hint: the converged evaluation must match the
    // cold-started one.
    let (entry, data, prior) = cooling_setup();
    let grid = TimeGrid::new(entry.default_times.clone(), 1).unwrap();
    let source = OdeTrajectory::new(&entry.system, Method::Rk4);
    let opts = OptimOpts::default();
    let theta = DVector::from_vec(vec![-0.47, 79.5]);
    let cold = laplace_eval_with(&source, &theta, &data, &prior, &grid, &opts, None);
    let warm_point = DVector::from_element(1, 27.0);
    let warm = laplace_eval_with(&source, &theta, &data, &prior, &grid, &opts, Some(&warm_point));
    assert!((cold.log_post - warm.log_post).abs() < 1e-6);
    assert!((cold.x1_hat[0] - warm.x1_hat[0]).abs() < 1e-5);
}
