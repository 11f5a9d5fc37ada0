//! Built-in ODE systems with analytic derivatives, closed-form solutions
//! where they exist, the exact posterior for the cooling model, and
//! synthetic data generation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::laplace::GammaParams;
use crate::ode::{integrate, Method, OdeSystem, TimeGrid};
use crate::sensitivity::{Propagated, SensitivityBundle, TrajectorySource};

/// Exact solution as a function of (theta, x1, elapsed time since t1).
pub type ClosedForm = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>;

/// A ready-to-run model: the system, generating values, default grid and
/// prior hyperparameters.
pub struct ModelCatalogEntry {
    pub name: &'static str,
    pub system: OdeSystem,
    /// Generating parameter used in the simulation studies.
    pub theta_true: DVector<f64>,
    /// Generating initial state.
    pub x1_true: DVector<f64>,
    /// Generating noise variance.
    pub sigma2_true: f64,
    /// Default observation times.
    pub default_times: Vec<f64>,
    /// Gamma hyperparameters for tau2 and the x1 prior scale.
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// A reasonable grid center when none is supplied.
    pub theta_center: DVector<f64>,
    /// Exact solution, when one exists.
    pub closed_form: Option<ClosedForm>,
    /// First observation recorded in the original benchmark runs (the
    /// generating seed is unknown, so these are reference fixtures, not
    /// regenerable values).
    pub fixture_y1: Option<DVector<f64>>,
    /// Whether simulated observations are folded to be non-negative.
    pub positivity: bool,
}

impl ModelCatalogEntry {
    pub fn default_grid(&self) -> TimeGrid {
        TimeGrid::new(self.default_times.clone(), 1).expect("catalog grid is valid")
    }
}

/// Look up a model by CLI name.
pub fn by_name(name: &str) -> Result<ModelCatalogEntry> {
    match name.to_ascii_lowercase().as_str() {
        "cooling" | "newton-cooling" => Ok(newton_cooling()),
        "fhn" | "fitzhugh-nagumo" => Ok(fitzhugh_nagumo()),
        "predator-prey" | "pp" => Ok(predator_prey()),
        "logistic" => Ok(logistic()),
        other => Err(Error::spec(format!(
            "unknown model '{other}' (cooling|fhn|predator-prey|logistic)"
        ))),
    }
}

/// Newton's law of cooling: `dx/dt = theta1 (x - theta2)`, exact solution
/// `x(t) = theta2 - (theta2 - x1) exp(theta1 t)`.
pub fn newton_cooling() -> ModelCatalogEntry {
    let support = vec![(-200.0, 0.0), (-200.0, 500.0)];
    let system = OdeSystem::new(
        1,
        2,
        |x, _t, th| DVector::from_element(1, th[0] * (x[0] - th[1])),
        |_x, _t, th| DMatrix::from_element(1, 1, th[0]),
        support,
    )
    .with_hess(|_x, _t, _th| vec![DMatrix::zeros(1, 1)]);
    let closed: ClosedForm = Arc::new(|th: &DVector<f64>, x1: &DVector<f64>, dt: f64| {
        DVector::from_element(1, th[1] - (th[1] - x1[0]) * (th[0] * dt).exp())
    });
    ModelCatalogEntry {
        name: "cooling",
        system,
        theta_true: DVector::from_vec(vec![-0.5, 80.0]),
        x1_true: DVector::from_element(1, 20.0),
        sigma2_true: 25.0,
        default_times: uniform_times(0.0, 0.75, 20),
        a: 0.1,
        b: 0.01,
        c: 100.0,
        theta_center: DVector::from_vec(vec![-0.547, 80.933]),
        closed_form: Some(closed),
        fixture_y1: Some(DVector::from_element(1, 15.515)),
        positivity: false,
    }
}

/// The benchmark grids for the cooling study: n in {20, 50, 100, 150} with
/// spacings {0.75, 0.3, 0.15, 0.1}.
pub fn cooling_times(n: usize) -> Option<Vec<f64>> {
    let h = match n {
        20 => 0.75,
        50 => 0.3,
        100 => 0.15,
        150 => 0.1,
        _ => return None,
    };
    Some(uniform_times(0.0, h, n))
}

fn uniform_times(t1: f64, h: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| t1 + h * i as f64).collect()
}

/// FitzHugh-Nagumo:
/// `dx1/dt = theta3 (x1 - x1^3/3 + x2)`,
/// `dx2/dt = -(x1 - theta1 + theta2 x2) / theta3`.
pub fn fitzhugh_nagumo() -> ModelCatalogEntry {
    let support = vec![(-0.8, 0.8), (-0.8, 0.8), (0.0, 8.0)];
    let system = OdeSystem::new(
        2,
        3,
        |x, _t, th| {
            DVector::from_vec(vec![
                th[2] * (x[0] - x[0].powi(3) / 3.0 + x[1]),
                -(x[0] - th[0] + th[1] * x[1]) / th[2],
            ])
        },
        |x, _t, th| {
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    th[2] * (1.0 - x[0] * x[0]),
                    th[2],
                    -1.0 / th[2],
                    -th[1] / th[2],
                ],
            )
        },
        support,
    )
    .with_hess(|x, _t, th| {
        // Only d2 f1 / dx1^2 = -2 theta3 x1 is non-zero.
        let mut h1 = DMatrix::zeros(2, 2);
        h1[(0, 0)] = -2.0 * th[2] * x[0];
        vec![h1, DMatrix::zeros(2, 2)]
    });
    ModelCatalogEntry {
        name: "fhn",
        system,
        theta_true: DVector::from_vec(vec![0.2, 0.2, 3.0]),
        x1_true: DVector::from_vec(vec![-1.0, 1.0]),
        sigma2_true: 0.25,
        default_times: uniform_times(0.0, 0.2, 100),
        a: 0.1,
        b: 0.01,
        c: 100.0,
        theta_center: DVector::from_vec(vec![0.2, 0.2, 3.0]),
        closed_form: None,
        fixture_y1: Some(DVector::from_vec(vec![-1.449, 1.092])),
        positivity: false,
    }
}

/// Chemostat predator-prey food chain (nitrogen, Chlorella, reproducing and
/// total Brachionus) with Michaelis-Menten uptake terms and fixed inflow
/// `N* = 8`, dilution `delta = 0.68`.
pub fn predator_prey() -> ModelCatalogEntry {
    const N_STAR: f64 = 8.0;
    const DELTA: f64 = 0.68;
    let support = vec![
        (0.0, 70.0),
        (0.0, 10.0),
        (0.0, 70.0),
        (0.0, 70.0),
        (0.0, 70.0),
        (0.0, 10.0),
        (0.0, 10.0),
    ];
    let system = OdeSystem::new(
        4,
        7,
        |x, _t, th| {
            let chl = th[0] * x[0] / (th[1] + x[0]); // Chlorella uptake per unit x2
            let bra = th[2] * x[1] / (th[3] + x[1]); // Brachionus uptake per unit consumer
            DVector::from_vec(vec![
                DELTA * (N_STAR - x[0]) - chl * x[1],
                chl * x[1] - bra * x[3] / th[4] - DELTA * x[1],
                bra * x[2] - (DELTA + th[5] + th[6]) * x[2],
                bra * x[2] - (DELTA + th[5]) * x[3],
            ])
        },
        |x, _t, th| {
            let d1 = th[1] + x[0];
            let d2 = th[3] + x[1];
            let chl = th[0] * x[0] / d1;
            let bra = th[2] * x[1] / d2;
            let dchl = th[0] * th[1] / (d1 * d1); // d(chl)/dx1
            let dbra = th[2] * th[3] / (d2 * d2); // d(bra)/dx2
            DMatrix::from_row_slice(
                4,
                4,
                &[
                    -DELTA - dchl * x[1],
                    -chl,
                    0.0,
                    0.0,
                    dchl * x[1],
                    chl - dbra * x[3] / th[4] - DELTA,
                    0.0,
                    -bra / th[4],
                    0.0,
                    dbra * x[2],
                    bra - (DELTA + th[5] + th[6]),
                    0.0,
                    0.0,
                    dbra * x[2],
                    bra,
                    -(DELTA + th[5]),
                ],
            )
        },
        support,
    )
    .with_hess(|x, _t, th| {
        let d1 = th[1] + x[0];
        let d2 = th[3] + x[1];
        let dchl = th[0] * th[1] / (d1 * d1);
        let d2chl = -2.0 * th[0] * th[1] / (d1 * d1 * d1);
        let dbra = th[2] * th[3] / (d2 * d2);
        let d2bra = -2.0 * th[2] * th[3] / (d2 * d2 * d2);
        let mut h = vec![DMatrix::zeros(4, 4); 4];
        // f1 = delta(N*-x1) - chl x2
        h[0][(0, 0)] = -d2chl * x[1];
        h[0][(0, 1)] = -dchl;
        h[0][(1, 0)] = -dchl;
        // f2 = chl x2 - bra x4 / th5 - delta x2
        h[1][(0, 0)] = d2chl * x[1];
        h[1][(0, 1)] = dchl;
        h[1][(1, 0)] = dchl;
        h[1][(1, 1)] = -d2bra * x[3] / th[4];
        h[1][(1, 3)] = -dbra / th[4];
        h[1][(3, 1)] = -dbra / th[4];
        // f3 = bra x3 - (delta + th6 + th7) x3
        h[2][(1, 1)] = d2bra * x[2];
        h[2][(1, 2)] = dbra;
        h[2][(2, 1)] = dbra;
        // f4 = bra x3 - (delta + th6) x4
        h[3][(1, 1)] = d2bra * x[2];
        h[3][(1, 2)] = dbra;
        h[3][(2, 1)] = dbra;
        h
    });
    ModelCatalogEntry {
        name: "predator-prey",
        system,
        theta_true: DVector::from_vec(vec![3.3, 0.43, 2.25, 1.5, 2.5, 0.055, 0.4]),
        x1_true: DVector::from_vec(vec![1.0, 3.0, 5.0, 5.0]),
        sigma2_true: 1.0,
        default_times: uniform_times(0.0, 0.1, 100),
        a: 0.1,
        b: 0.01,
        c: 100.0,
        theta_center: DVector::from_vec(vec![3.3, 0.43, 2.25, 1.5, 2.5, 0.055, 0.4]),
        closed_form: None,
        fixture_y1: Some(DVector::from_vec(vec![0.103, 3.185, 6.298, 5.137])),
        positivity: true,
    }
}

/// Logistic growth `dx/dt = (theta1/theta2) x (theta2 - x)` with carrying
/// capacity `theta2`; exact solution included.
pub fn logistic() -> ModelCatalogEntry {
    let support = vec![(0.0, 1.0), (300.0, 1000.0)];
    let system = OdeSystem::new(
        1,
        2,
        |x, _t, th| DVector::from_element(1, th[0] / th[1] * x[0] * (th[1] - x[0])),
        |x, _t, th| DMatrix::from_element(1, 1, th[0] - 2.0 * th[0] / th[1] * x[0]),
        support,
    )
    .with_hess(|_x, _t, th| vec![DMatrix::from_element(1, 1, -2.0 * th[0] / th[1])]);
    let closed: ClosedForm = Arc::new(|th: &DVector<f64>, x1: &DVector<f64>, dt: f64| {
        let k = th[1];
        let r = th[0];
        let v = k / (1.0 + (k / x1[0] - 1.0) * (-r * dt).exp());
        DVector::from_element(1, v)
    });
    ModelCatalogEntry {
        name: "logistic",
        system,
        theta_true: DVector::from_vec(vec![0.02, 532.0]),
        x1_true: DVector::from_element(1, 3.929),
        sigma2_true: 25.0,
        default_times: uniform_times(0.0, 10.0, 23),
        a: 0.1,
        b: 0.01,
        c: 100.0,
        theta_center: DVector::from_vec(vec![0.020, 532.125]),
        closed_form: Some(closed),
        fixture_y1: Some(DVector::from_element(1, 3.929)),
        positivity: false,
    }
}

/// The `z_i(theta) = y_i - theta2 + theta2 exp(theta1 (i-1) h)` residuals of
/// the cooling model's exact marginalization.
pub fn cooling_z_values(theta: &DVector<f64>, data: &Dataset) -> Result<Vec<f64>> {
    let h = uniform_spacing(data)?;
    Ok((0..data.n())
        .map(|i| {
            let e = (theta[0] * (i as f64) * h).exp();
            data.row(i)[0] - theta[1] + theta[1] * e
        })
        .collect())
}

/// Exact log marginal posterior of `theta` for the cooling model (up to one
/// additive constant), for a uniform time grid `t_i = t_1 + (i-1) h`.
///
/// The initial state integrates out exactly: with `e_i = exp(theta1 (i-1) h)`,
/// `S = 1/c + sum e_i^2`, `T = mu/c + sum z_i e_i`,
/// `u~ = mu^2/c + sum z_i^2 - T^2/S`, the marginal is
/// `pi(theta) S^{-1/2} (u~/2 + b)^{-(np/2 + a)}`.
pub fn cooling_exact_posterior(
    theta: &DVector<f64>,
    data: &Dataset,
    prior: &crate::laplace::PriorSpec,
) -> Result<f64> {
    let log_prior = prior.theta_prior.log_density(theta);
    if log_prior == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let (u_tilde, s) = cooling_exact_u(theta, data, prior)?;
    let n = data.n() as f64;
    let val = log_prior - (n / 2.0 + prior.a) * (0.5 * u_tilde + prior.b).ln() - 0.5 * s.ln();
    Ok(if val.is_finite() { val } else { f64::NEG_INFINITY })
}

/// The exact Gamma conditional of `tau2` for the cooling model.
pub fn cooling_exact_tau2(
    theta: &DVector<f64>,
    data: &Dataset,
    prior: &crate::laplace::PriorSpec,
) -> Result<GammaParams> {
    let (u_tilde, _) = cooling_exact_u(theta, data, prior)?;
    Ok(GammaParams {
        shape: data.n() as f64 / 2.0 + prior.a,
        rate: 0.5 * u_tilde + prior.b,
    })
}

fn cooling_exact_u(
    theta: &DVector<f64>,
    data: &Dataset,
    prior: &crate::laplace::PriorSpec,
) -> Result<(f64, f64)> {
    if data.p() != 1 {
        return Err(Error::spec("cooling exact posterior requires p = 1"));
    }
    let h = uniform_spacing(data)?;
    let mu = prior.mu_x1[0];
    let c = prior.c;
    let z = cooling_z_values(theta, data)?;
    let mut s = 1.0 / c;
    let mut t = mu / c;
    let mut zz = mu * mu / c;
    for (i, zi) in z.iter().enumerate() {
        let e = (theta[0] * (i as f64) * h).exp();
        s += e * e;
        t += zi * e;
        zz += zi * zi;
    }
    Ok((zz - t * t / s, s))
}

fn uniform_spacing(data: &Dataset) -> Result<f64> {
    let times = data.times();
    if times.len() < 2 {
        return Err(Error::spec("need at least two observations"));
    }
    let h = times[1] - times[0];
    for i in 1..times.len() {
        let expected = times[0] + h * i as f64;
        if (times[i] - expected).abs() > 1e-9 * h.abs().max(1.0) {
            return Err(Error::spec("exact cooling posterior requires a uniform time grid"));
        }
    }
    Ok(h)
}

/// Analytic trajectory source for the cooling model: the flow is affine in
/// the initial state, so `Z_i = exp(theta1 (t_i - t_1))` and `W_i = 0`.
pub struct CoolingClosedForm;

impl TrajectorySource for CoolingClosedForm {
    fn p(&self) -> usize {
        1
    }

    fn propagate(
        &self,
        x1: &DVector<f64>,
        theta: &DVector<f64>,
        grid: &TimeGrid,
    ) -> Result<Propagated> {
        let t1 = grid.times()[0];
        let mut states = Vec::with_capacity(grid.n());
        let mut z = Vec::with_capacity(grid.n());
        let mut w = Vec::with_capacity(grid.n());
        for &t in grid.times() {
            let e = (theta[0] * (t - t1)).exp();
            states.push(DVector::from_element(1, theta[1] - (theta[1] - x1[0]) * e));
            z.push(DMatrix::from_element(1, 1, e));
            w.push(vec![DMatrix::zeros(1, 1)]);
        }
        Ok(Propagated {
            states,
            sens: SensitivityBundle { z, w },
        })
    }

    fn states_only(
        &self,
        x1: &DVector<f64>,
        theta: &DVector<f64>,
        grid: &TimeGrid,
    ) -> Result<Vec<DVector<f64>>> {
        let t1 = grid.times()[0];
        Ok(grid
            .times()
            .iter()
            .map(|&t| {
                DVector::from_element(1, theta[1] - (theta[1] - x1[0]) * (theta[0] * (t - t1)).exp())
            })
            .collect())
    }
}

/// Simulate observations `y_i = x_i + eps_i` from a catalog entry: the mean
/// trajectory comes from RK4 with `m_fine` sub-steps (default 100), noise is
/// iid `N_p(0, sigma2 I)`, and `positivity` folds each component to its
/// absolute value.
#[allow(clippy::too_many_arguments)]
pub fn simulate_data(
    entry: &ModelCatalogEntry,
    theta: &DVector<f64>,
    x1: &DVector<f64>,
    sigma2: f64,
    times: &[f64],
    m_fine: usize,
    seed: u64,
    positivity: bool,
) -> Result<Dataset> {
    if sigma2 < 0.0 {
        return Err(Error::spec("sigma2 must be non-negative"));
    }
    let grid = TimeGrid::new(times.to_vec(), m_fine.max(1))?;
    let traj = integrate(&entry.system, x1, theta, &grid, Method::Rk4)?;
    let p = entry.system.p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Vec::with_capacity(times.len());
    if sigma2 == 0.0 {
        obs.extend(traj.states.iter().cloned());
    } else {
        let normal = Normal::new(0.0, sigma2.sqrt()).expect("valid normal");
        for state in &traj.states {
            let mut row = state.clone();
            for j in 0..p {
                row[j] += normal.sample(&mut rng);
            }
            obs.push(row);
        }
    }
    if positivity {
        for row in &mut obs {
            for v in row.iter_mut() {
                *v = v.abs();
            }
        }
    }
    let columns = (0..p).map(|j| format!("y{}", j + 1)).collect();
    Dataset::new(times.to_vec(), obs, columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplace::{PriorSpec, ThetaPrior};
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn cooling_closed_form_value() {
        let entry = newton_cooling();
        let cf = entry.closed_form.as_ref().unwrap();
        let x = cf(
            &DVector::from_vec(vec![-0.5, 80.0]),
            &DVector::from_element(1, 20.0),
            0.75,
        );
        assert_relative_eq!(x[0], 80.0 - 60.0 * (-0.375f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(x[0], 38.762643272541666, epsilon = 1e-9);
    }

    #[test]
    fn cooling_defaults_and_constant_jacobian() {
        let entry = newton_cooling();
        assert_eq!(entry.system.p, 1);
        assert_eq!(entry.system.q, 2);
        assert_eq!(entry.x1_true[0], 20.0);
        assert_eq!(entry.theta_true.as_slice(), &[-0.5, 80.0]);
        assert_eq!(entry.sigma2_true, 25.0);
        assert_eq!((entry.a, entry.b, entry.c), (0.1, 0.01, 100.0));
        assert_eq!(entry.system.theta_support, vec![(-200.0, 0.0), (-200.0, 500.0)]);
        assert_eq!(entry.default_times.len(), 20);
        assert_relative_eq!(entry.default_times[19], 14.25);
        for n in [20usize, 50, 100, 150] {
            assert_eq!(cooling_times(n).unwrap().len(), n);
        }
        let th = DVector::from_vec(vec![-0.7, 10.0]);
        for x in [-5.0, 0.0, 40.0] {
            let j = entry
                .system
                .jac_at(&DVector::from_element(1, x), 0.0, &th)
                .unwrap();
            assert_eq!(j[(0, 0)], -0.7);
        }
    }

    #[test]
    fn fhn_jacobian_at_origin_and_support() {
        let entry = fitzhugh_nagumo();
        assert_eq!(entry.theta_true.as_slice(), &[0.2, 0.2, 3.0]);
        assert_eq!(entry.x1_true.as_slice(), &[-1.0, 1.0]);
        assert_eq!(entry.sigma2_true, 0.25);
        let th = DVector::from_vec(vec![0.2, 0.3, 3.0]);
        let j = entry.system.jac_at(&DVector::zeros(2), 0.0, &th).unwrap();
        assert_relative_eq!(j[(0, 0)], 3.0);
        assert_relative_eq!(j[(0, 1)], 3.0);
        assert_relative_eq!(j[(1, 0)], -1.0 / 3.0);
        assert_relative_eq!(j[(1, 1)], -0.1);
        // theta3 = 0 is outside the open support box.
        assert!(!entry
            .system
            .theta_in_support(&DVector::from_vec(vec![0.2, 0.2, 0.0])));
    }

    #[test]
    fn predator_prey_structure() {
        let entry = predator_prey();
        assert_eq!(
            entry.theta_true.as_slice(),
            &[3.3, 0.43, 2.25, 1.5, 2.5, 0.055, 0.4]
        );
        let th = entry.theta_true.clone();
        // x2 = 0 kills the birth terms of x3 and x4.
        let x = DVector::from_vec(vec![1.0, 0.0, 5.0, 5.0]);
        let f = entry.system.rhs_at(&x, 0.0, &th).unwrap();
        assert_relative_eq!(f[2], -(0.68 + 0.055 + 0.4) * 5.0, epsilon = 1e-12);
        assert_relative_eq!(f[3], -(0.68 + 0.055) * 5.0, epsilon = 1e-12);
        // d f1 / d x1 = -delta - th1 x2 th2 / (th2 + x1)^2 by the quotient rule.
        let x = DVector::from_vec(vec![1.0, 3.0, 5.0, 5.0]);
        let j = entry.system.jac_at(&x, 0.0, &th).unwrap();
        let expected = -0.68 - 3.3 * 3.0 * 0.43 / (0.43f64 + 1.0).powi(2);
        assert_relative_eq!(j[(0, 0)], expected, epsilon = 1e-12);
    }

    #[test]
    fn logistic_fixed_points_and_center() {
        let entry = logistic();
        let th = DVector::from_vec(vec![0.02, 532.125]);
        for x in [0.0, 532.125] {
            let f = entry
                .system
                .rhs_at(&DVector::from_element(1, x), 0.0, &th)
                .unwrap();
            assert_relative_eq!(f[0], 0.0, epsilon = 1e-12);
        }
        assert!(entry.system.theta_in_support(&entry.theta_center));
    }

    #[test]
    fn closed_forms_satisfy_their_odes() {
        // Central-difference time derivative vs rhs at 100 random times.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for entry in [newton_cooling(), logistic()] {
            let cf = entry.closed_form.as_ref().unwrap().clone();
            let th = entry.theta_true.clone();
            let x1 = entry.x1_true.clone();
            for _ in 0..100 {
                let t: f64 = rng.gen_range(0.0..10.0);
                let dt = 1e-6;
                let xp = cf(&th, &x1, t + dt);
                let xm = cf(&th, &x1, t - dt);
                let deriv = (xp - xm) / (2.0 * dt);
                let f = entry.system.rhs_at(&cf(&th, &x1, t), t, &th).unwrap();
                assert!(
                    (deriv[0] - f[0]).abs() < 1e-5 * f[0].abs().max(1.0),
                    "{}: residual {} at t={t}",
                    entry.name,
                    (deriv[0] - f[0]).abs()
                );
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        // jac vs FD of rhs (relative 1e-5) and hess vs FD of jac at 20
        // random in-range states, all four models.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for entry in [newton_cooling(), fitzhugh_nagumo(), predator_prey(), logistic()] {
            let p = entry.system.p;
            let th = entry.theta_true.clone();
            for _ in 0..20 {
                let x = DVector::from_fn(p, |j, _| {
                    let base = entry.x1_true[j].abs().max(1.0);
                    rng.gen_range(0.2..1.8) * base
                });
                let jac = entry.system.jac_at(&x, 0.0, &th).unwrap();
                let mut fd = DMatrix::zeros(p, p);
                for u in 0..p {
                    let step = 1e-6 * x[u].abs().max(1.0);
                    let mut xp = x.clone();
                    xp[u] += step;
                    let mut xm = x.clone();
                    xm[u] -= step;
                    let fp = entry.system.rhs_at(&xp, 0.0, &th).unwrap();
                    let fm = entry.system.rhs_at(&xm, 0.0, &th).unwrap();
                    for j in 0..p {
                        fd[(j, u)] = (fp[j] - fm[j]) / (2.0 * step);
                    }
                }
                let rel = (&jac - &fd).norm() / fd.norm().max(1.0);
                assert!(rel < 1e-5, "{}: jac rel err {rel}", entry.name);

                let hess = entry.system.hess_at(&x, 0.0, &th).unwrap();
                for j in 0..p {
                    let mut fdh = DMatrix::zeros(p, p);
                    for v in 0..p {
                        let step = 1e-5 * x[v].abs().max(1.0);
                        let mut xp = x.clone();
                        xp[v] += step;
                        let mut xm = x.clone();
                        xm[v] -= step;
                        let jp = entry.system.jac_at(&xp, 0.0, &th).unwrap();
                        let jm = entry.system.jac_at(&xm, 0.0, &th).unwrap();
                        for u in 0..p {
                            fdh[(u, v)] = (jp[(j, u)] - jm[(j, u)]) / (2.0 * step);
                        }
                    }
                    let fdh = (&fdh + fdh.transpose()) * 0.5;
                    let rel = (&hess[j] - &fdh).norm() / fdh.norm().max(1.0);
                    assert!(rel < 1e-4, "{}: hess[{j}] rel err {rel}", entry.name);
                }
            }
        }
    }

    #[test]
    fn cooling_z_residual_identity() {
        // With theta2 = x1 = mu the two algebraic forms of z_i coincide.
        let entry = newton_cooling();
        let times = uniform_times(0.0, 0.75, 10);
        let data = simulate_data(
            &entry,
            &entry.theta_true,
            &entry.x1_true,
            4.0,
            &times,
            50,
            21,
            false,
        )
        .unwrap();
        let theta = DVector::from_vec(vec![-0.4, 20.0]);
        let z = cooling_z_values(&theta, &data).unwrap();
        for (i, zi) in z.iter().enumerate() {
            let e = (-0.4 * 0.75 * i as f64).exp();
            let alt = data.row(i)[0] - 20.0 * (1.0 - e);
            assert_relative_eq!(*zi, alt, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_posterior_requires_uniform_grid() {
        let entry = newton_cooling();
        let data = Dataset::new(
            vec![0.0, 1.0, 3.0],
            vec![
                DVector::from_element(1, 1.0),
                DVector::from_element(1, 2.0),
                DVector::from_element(1, 3.0),
            ],
            vec!["y1".into()],
        )
        .unwrap();
        let prior = PriorSpec::new(
            0.1,
            0.01,
            100.0,
            data.first_observation(),
            ThetaPrior::Box(entry.system.theta_support.clone()),
        )
        .unwrap();
        assert!(cooling_exact_posterior(&DVector::from_vec(vec![-0.5, 80.0]), &data, &prior).is_err());
    }

    #[test]
    fn simulate_data_noise_free_matches_fine_trajectory() {
        let entry = newton_cooling();
        let times = uniform_times(0.0, 0.75, 12);
        let data = simulate_data(
            &entry,
            &entry.theta_true,
            &entry.x1_true,
            0.0,
            &times,
            100,
            5,
            false,
        )
        .unwrap();
        let grid = TimeGrid::new(times.clone(), 100).unwrap();
        let traj = integrate(&entry.system, &entry.x1_true, &entry.theta_true, &grid, Method::Rk4)
            .unwrap();
        for i in 0..data.n() {
            assert_eq!(data.row(i)[0].to_bits(), traj.states[i][0].to_bits());
        }
    }

    #[test]
    fn simulate_data_is_seed_deterministic() {
        let entry = fitzhugh_nagumo();
        let times = uniform_times(0.0, 0.2, 30);
        let mk = || {
            simulate_data(
                &entry,
                &entry.theta_true,
                &entry.x1_true,
                0.25,
                &times,
                100,
                42,
                false,
            )
            .unwrap()
        };
        assert_eq!(crate::dataset::to_csv(&mk()), crate::dataset::to_csv(&mk()));
    }

    #[test]
    fn simulate_data_noise_variance_is_calibrated() {
        let entry = newton_cooling();
        let times = uniform_times(0.0, 0.01, 10_000);
        let sigma2 = 25.0;
        let data = simulate_data(
            &entry,
            &entry.theta_true,
            &entry.x1_true,
            sigma2,
            &times,
            1,
            77,
            false,
        )
        .unwrap();
        let grid = TimeGrid::new(times, 1).unwrap();
        let traj = integrate(&entry.system, &entry.x1_true, &entry.theta_true, &grid, Method::Rk4)
            .unwrap();
        let resid: Vec<f64> = (0..data.n())
            .map(|i| data.row(i)[0] - traj.states[i][0])
            .collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64;
        assert!(
            (var - sigma2).abs() / sigma2 < 0.05,
            "sample variance {var} vs {sigma2}"
        );
    }

    #[test]
    fn positivity_flag_folds_negative_observations() {
        let entry = predator_prey();
        let times = uniform_times(0.0, 0.1, 40);
        let data = simulate_data(
            &entry,
            &entry.theta_true,
            &entry.x1_true,
            1.0,
            &times,
            25,
            13,
            true,
        )
        .unwrap();
        for i in 0..data.n() {
            for j in 0..data.p() {
                assert!(data.row(i)[j] >= 0.0);
            }
        }
    }
}
