//! Marginalization of the initial state and the noise precision.
//!
//! For fixed `theta`, the initial state is eliminated by a Gaussian
//! (Laplace) approximation around the minimizer of the penalized lack of fit
//!
//! `F(x1) = n g(x1, theta) + |x1 - mu|^2 / c`,
//!
//! giving the two ingredients of the marginal posterior of `theta`:
//! `u(theta) = F(x1_hat)` and `v(theta) = log det(n g'' + (2/c) I_p)`.
//! The noise precision `tau2` then has a closed-form Gamma conditional, and
//! the log marginal posterior of `theta` is assembled entirely in the log
//! domain:
//!
//! `log_post = log pi(theta) - (np/2 + a) log(u/2 + b) - v/2`
//!
//! exact up to one additive constant shared by all `theta`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::math;
use crate::ode::{Method, OdeSystem, TimeGrid};
use crate::sensitivity::{fit_stats_from, OdeTrajectory, TrajectorySource};

/// Prior on `theta`: a uniform box, or any log-density.
#[derive(Clone)]
pub enum ThetaPrior {
    /// Uniform over the open box; log-density 0 inside, `-inf` outside
    /// (normalizing constant dropped).
    Box(Vec<(f64, f64)>),
    /// A custom log-prior density (need not be normalized).
    LogDensity(Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for ThetaPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThetaPrior::Box(b) => f.debug_tuple("Box").field(b).finish(),
            ThetaPrior::LogDensity(_) => f.write_str("LogDensity(..)"),
        }
    }
}

impl ThetaPrior {
    pub fn log_density(&self, theta: &DVector<f64>) -> f64 {
        match self {
            ThetaPrior::Box(bounds) => {
                let inside = theta.len() == bounds.len()
                    && theta
                        .iter()
                        .zip(bounds)
                        .all(|(v, (lo, hi))| v.is_finite() && *v > *lo && *v < *hi);
                if inside {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            ThetaPrior::LogDensity(f) => f(theta),
        }
    }
}

/// Hyperparameters of the conjugate priors: `tau2 ~ Gamma(a, b)` (rate
/// parametrization, mean `a/b`) and `x1 | tau2 ~ N_p(mu_x1, (c/tau2) I_p)`.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub mu_x1: DVector<f64>,
    pub theta_prior: ThetaPrior,
}

impl PriorSpec {
    pub fn new(a: f64, b: f64, c: f64, mu_x1: DVector<f64>, theta_prior: ThetaPrior) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(Error::spec("prior hyperparameters a, b, c must be positive"));
        }
        if let ThetaPrior::Box(bounds) = &theta_prior {
            for (lo, hi) in bounds {
                if !(lo < hi) {
                    return Err(Error::spec("theta box must have lower < upper"));
                }
            }
        }
        Ok(PriorSpec { a, b, c, mu_x1, theta_prior })
    }
}

/// Optimizer controls for the inner `x1` problem.
#[derive(Debug, Clone)]
pub struct OptimOpts {
    /// Gradient-norm tolerance, scaled by `max(1, |F|)`.
    pub tol: f64,
    /// Newton iteration cap.
    pub newton_max: usize,
    /// Gradient-descent fallback iteration cap.
    pub gd_max: usize,
    /// Backtracking halvings per line search.
    pub max_halvings: usize,
}

impl Default for OptimOpts {
    fn default() -> Self {
        OptimOpts {
            tol: 1e-8,
            newton_max: 100,
            gd_max: 200,
            max_halvings: 30,
        }
    }
}

/// Why a grid point carries zero mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailTag {
    OutOfSupport,
    OptimFailed,
    EvalFailed,
    NonPd,
}

/// Everything the sampler needs to know about one `theta`.
#[derive(Debug, Clone)]
pub struct LaplaceEval {
    pub theta: DVector<f64>,
    pub x1_hat: DVector<f64>,
    /// Optimized penalized lack of fit `n g + |x1_hat - mu|^2 / c`.
    pub u: f64,
    /// `log det(n g'' + (2/c) I_p)` at the optimum.
    pub v: f64,
    /// Log marginal posterior up to a theta-independent constant; `-inf`
    /// when `fail` is set.
    pub log_post: f64,
    pub newton_iters: usize,
    pub converged: bool,
    pub fail: Option<FailTag>,
}

impl LaplaceEval {
    fn failed(theta: DVector<f64>, p: usize, tag: FailTag) -> Self {
        LaplaceEval {
            theta,
            x1_hat: DVector::zeros(p),
            u: f64::INFINITY,
            v: f64::INFINITY,
            log_post: f64::NEG_INFINITY,
            newton_iters: 0,
            converged: false,
            fail: Some(tag),
        }
    }
}

/// Gamma parameters in rate form (mean `shape / rate`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

/// Gaussian conditional for the initial state.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

struct Objective<'a, S: TrajectorySource + ?Sized> {
    source: &'a S,
    data: &'a Dataset,
    prior: &'a PriorSpec,
    grid: &'a TimeGrid,
    theta: &'a DVector<f64>,
    n: f64,
}

impl<'a, S: TrajectorySource + ?Sized> Objective<'a, S> {
    /// Penalized objective only (for line-search trial points).
    fn value(&self, x1: &DVector<f64>) -> Result<f64> {
        let states = self.source.states_only(x1, self.theta, self.grid)?;
        let mut g = 0.0;
        for (s, i) in states.iter().zip(0..self.data.n()) {
            g += (s - self.data.row(i)).norm_squared();
        }
        let diff = x1 - &self.prior.mu_x1;
        Ok(g + diff.norm_squared() / self.prior.c)
    }

    /// Objective with gradient and exact Hessian (second-order term
    /// included).
    fn full(&self, x1: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let prop = self.source.propagate(x1, self.theta, self.grid)?;
        let fs = fit_stats_from(&prop, self.data)?;
        let diff = x1 - &self.prior.mu_x1;
        let f = self.n * fs.g + diff.norm_squared() / self.prior.c;
        let grad = &fs.grad * self.n + &diff * (2.0 / self.prior.c);
        let mut hess = &fs.hess * self.n;
        for i in 0..hess.nrows() {
            hess[(i, i)] += 2.0 / self.prior.c;
        }
        Ok((f, grad, hess))
    }

    /// Objective with gradient and the Gauss-Newton curvature
    /// `2 sum Z^T Z + (2/c) I` (always positive definite; no second-order
    /// sensitivities needed). Drives the optimizer iterations.
    fn gauss_newton(&self, x1: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let (states, zs) = self.source.propagate_first(x1, self.theta, self.grid)?;
        let p = x1.len();
        let mut g = 0.0;
        let mut grad_g = DVector::zeros(p);
        let mut gn = DMatrix::zeros(p, p);
        for i in 0..self.data.n() {
            let resid = &states[i] - self.data.row(i);
            g += resid.norm_squared();
            grad_g += zs[i].transpose() * resid;
            gn += zs[i].transpose() * &zs[i];
        }
        let diff = x1 - &self.prior.mu_x1;
        let f = g + diff.norm_squared() / self.prior.c;
        let grad = grad_g * 2.0 + &diff * (2.0 / self.prior.c);
        let mut hess = gn * 2.0;
        for i in 0..p {
            hess[(i, i)] += 2.0 / self.prior.c;
        }
        Ok((f, grad, hess))
    }
}

/// Result of the inner optimization, carrying the objective pieces at the
/// returned point so callers need not re-propagate.
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x1_hat: DVector<f64>,
    pub converged: bool,
    pub iters: usize,
    /// Objective value `n g + |x1 - mu|^2 / c` at `x1_hat`.
    pub value: f64,
    /// Objective Hessian `n g'' + (2/c) I` at `x1_hat`.
    pub hess: DMatrix<f64>,
}

/// Minimize `F(x1) = n g(x1, theta) + |x1 - mu|^2 / c`.
///
/// Newton with step-halving backtracking; when the Newton system is not
/// positive definite or the direction fails to descend, the iteration falls
/// back to gradient descent with the same line search.
pub fn optimize_x1(
    sys: &OdeSystem,
    theta: &DVector<f64>,
    data: &Dataset,
    prior: &PriorSpec,
    grid: &TimeGrid,
    method: Method,
    opts: &OptimOpts,
) -> Result<OptimResult> {
    let source = OdeTrajectory::new(sys, method);
    optimize_x1_with(&source, theta, data, prior, grid, opts, None)
}

/// As `optimize_x1`, over any trajectory source and optional warm start.
pub fn optimize_x1_with<S: TrajectorySource + ?Sized>(
    source: &S,
    theta: &DVector<f64>,
    data: &Dataset,
    prior: &PriorSpec,
    grid: &TimeGrid,
    opts: &OptimOpts,
    warm_start: Option<&DVector<f64>>,
) -> Result<OptimResult> {
    let obj = Objective {
        source,
        data,
        prior,
        grid,
        theta,
        n: data.n() as f64,
    };
    // Far from the optimum a Gauss-Newton curvature (first-order
    // sensitivities only) is enough to make progress cheaply; the exact
    // Hessian takes over once the gradient is small so convergence to the
    // tight tolerance is quadratic.
    const EXACT_SWITCH: f64 = 1e-3;
    let mut x = warm_start.unwrap_or(&prior.mu_x1).clone();
    let mut iters = 0usize;

    let mut exact_mode = false;
    let refresh = |x: &DVector<f64>, exact: bool| -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        if exact {
            obj.full(x)
        } else {
            obj.gauss_newton(x)
        }
    };
    let mut f_val;
    let mut grad;
    let mut hess;
    match refresh(&x, exact_mode) {
        Ok(t) => (f_val, grad, hess) = t,
        Err(e) => {
            // A bad warm start must not poison the evaluation; retry from mu.
            if warm_start.is_some() {
                x = prior.mu_x1.clone();
                (f_val, grad, hess) = refresh(&x, exact_mode)?;
            } else {
                return Err(e);
            }
        }
    }

    for phase in 0..2 {
        let (use_newton, max_iters) = match phase {
            0 => (true, opts.newton_max),
            _ => (false, opts.gd_max),
        };
        let mut stalls = 0usize;
        for _ in 0..max_iters {
            if !exact_mode && grad.norm() <= EXACT_SWITCH * f_val.abs().max(1.0) {
                exact_mode = true;
                (f_val, grad, hess) = refresh(&x, true)?;
            }
            if grad.norm() <= opts.tol * f_val.abs().max(1.0) {
                if !exact_mode {
                    (f_val, _, hess) = refresh(&x, true)?;
                }
                return Ok(OptimResult {
                    x1_hat: x,
                    converged: true,
                    iters,
                    value: f_val,
                    hess,
                });
            }
            let mut newton_dir = None;
            if use_newton {
                if let Some(chol) = nalgebra::Cholesky::new(hess.clone()) {
                    let d = -chol.solve(&grad);
                    if grad.dot(&d) < 0.0 {
                        newton_dir = Some(d);
                    }
                }
            }
            let is_newton = newton_dir.is_some();
            let d = newton_dir.unwrap_or_else(|| {
                // Scale-free descent step so the first trial is sane even
                // for badly scaled objectives.
                let scale = hess.diagonal().iter().cloned().fold(0.0, f64::max).max(1e-12);
                -&grad / scale
            });
            // Inside the quadratic basin the predicted decrease drops below
            // what f64 objective comparisons can resolve; the damped step is
            // contraction-safe there, so skip the line search.
            let predicted = -grad.dot(&d);
            if is_newton
                && predicted <= 1e-6 * f_val.abs().max(1.0)
                && d.norm() <= 1e-2 * (1.0 + x.norm())
            {
                x += &d;
                iters += 1;
                exact_mode = true;
                (f_val, grad, hess) = refresh(&x, true)?;
                continue;
            }
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..=opts.max_halvings {
                let trial = &x + &d * step;
                if let Ok(f_trial) = obj.value(&trial) {
                    if f_trial.is_finite() && f_trial < f_val {
                        x = trial;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                // Near the optimum the objective improvement falls below f64
                // resolution before the gradient test passes. A tiny Newton
                // step is a contraction there: take it and let the gradient
                // check decide.
                if is_newton && d.norm() <= 1e-7 * (1.0 + x.norm()) && stalls < 3 {
                    stalls += 1;
                    x += &d;
                    iters += 1;
                    exact_mode = true;
                    (f_val, grad, hess) = refresh(&x, true)?;
                    continue;
                }
                // No progress along this direction; let the next phase (or
                // the convergence check above) decide.
                break;
            }
            iters += 1;
            (f_val, grad, hess) = refresh(&x, exact_mode)?;
        }
        if grad.norm() <= opts.tol * f_val.abs().max(1.0) {
            break;
        }
    }
    let converged = grad.norm() <= opts.tol * f_val.abs().max(1.0);
    let (value, hess) = if converged {
        if exact_mode {
            (f_val, hess)
        } else {
            let (v, _, h) = obj.full(&x)?;
            (v, h)
        }
    } else {
        (f_val, hess)
    };
    Ok(OptimResult {
        x1_hat: x,
        converged,
        iters,
        value,
        hess,
    })
}

/// Evaluate the Laplace-approximated log marginal posterior of `theta`.
pub fn laplace_eval(
    sys: &OdeSystem,
    theta: &DVector<f64>,
    data: &Dataset,
    prior: &PriorSpec,
    grid: &TimeGrid,
    method: Method,
) -> LaplaceEval {
    let source = OdeTrajectory::new(sys, method);
    laplace_eval_with(&source, theta, data, prior, grid, &OptimOpts::default(), None)
}

/// As `laplace_eval`, over any trajectory source, with optimizer options and
/// an optional warm start for the inner problem. Failures are mapped to
/// `log_post = -inf` with a diagnostic tag rather than an error: stiff
/// parameter values at grid edges are expected and carry zero mass.
pub fn laplace_eval_with<S: TrajectorySource + ?Sized>(
    source: &S,
    theta: &DVector<f64>,
    data: &Dataset,
    prior: &PriorSpec,
    grid: &TimeGrid,
    opts: &OptimOpts,
    warm_start: Option<&DVector<f64>>,
) -> LaplaceEval {
    let p = source.p();
    let log_prior = prior.theta_prior.log_density(theta);
    if log_prior == f64::NEG_INFINITY {
        return LaplaceEval::failed(theta.clone(), p, FailTag::OutOfSupport);
    }

    let mut opt = match optimize_x1_with(source, theta, data, prior, grid, opts, warm_start) {
        Ok(o) => o,
        Err(_) => return LaplaceEval::failed(theta.clone(), p, FailTag::EvalFailed),
    };
    if !opt.converged && warm_start.is_some() {
        // A poor warm start must not turn a valid point into zero mass.
        opt = match optimize_x1_with(source, theta, data, prior, grid, opts, None) {
            Ok(o) => o,
            Err(_) => return LaplaceEval::failed(theta.clone(), p, FailTag::EvalFailed),
        };
    }
    if !opt.converged {
        return LaplaceEval::failed(theta.clone(), p, FailTag::OptimFailed);
    }

    let u = opt.value;
    let v = match math::log_det_spd(&opt.hess, "laplace curvature") {
        Ok(v) => v,
        Err(_) => return LaplaceEval::failed(theta.clone(), p, FailTag::NonPd),
    };

    let n = data.n() as f64;
    let pf = p as f64;
    let log_post = log_prior - (n * pf / 2.0 + prior.a) * (0.5 * u + prior.b).ln() - 0.5 * v;
    let log_post = if log_post.is_finite() { log_post } else { f64::NEG_INFINITY };
    LaplaceEval {
        theta: theta.clone(),
        x1_hat: opt.x1_hat,
        u,
        v,
        log_post,
        newton_iters: opt.iters,
        converged: true,
        fail: if log_post.is_finite() { None } else { Some(FailTag::EvalFailed) },
    }
}

/// `tau2 | theta, y ~ Gamma(np/2 + a, u(theta)/2 + b)`.
pub fn tau2_conditional(eval: &LaplaceEval, n: usize, p: usize, prior: &PriorSpec) -> GammaParams {
    GammaParams {
        shape: (n * p) as f64 / 2.0 + prior.a,
        rate: 0.5 * eval.u + prior.b,
    }
}

/// Gaussian conditional of the initial state read off the Laplace quadratic
/// expansion: mean `x1_hat`, covariance `(2/tau2) (n g'' + (2/c) I)^{-1}`.
///
/// The curvature matrix is rebuilt from `v`'s factorization inputs, so this
/// needs the same objective pieces; callers pass the curvature explicitly.
pub fn x1_conditional(
    x1_hat: &DVector<f64>,
    curvature: &DMatrix<f64>,
    tau2: f64,
) -> Result<GaussianParams> {
    if tau2 <= 0.0 {
        return Err(Error::spec("tau2 must be positive"));
    }
    let chol = nalgebra::Cholesky::new(curvature.clone()).ok_or_else(|| {
        Error::NonPd("x1 conditional curvature; try a larger m or check theta".into())
    })?;
    let p = curvature.nrows();
    let inv = chol.solve(&DMatrix::identity(p, p));
    let cov = (&inv + inv.transpose()) * (1.0 / tau2); // (2/tau2) * inv / 2 symmetrized
    Ok(GaussianParams { mean: x1_hat.clone(), cov })
}

/// The curvature matrix `n g''(x1_hat) + (2/c) I_p` at a finished
/// evaluation, for posterior-predictive draws of the initial state.
pub fn curvature_at<S: TrajectorySource + ?Sized>(
    source: &S,
    eval: &LaplaceEval,
    data: &Dataset,
    prior: &PriorSpec,
    grid: &TimeGrid,
) -> Result<DMatrix<f64>> {
    let obj = Objective {
        source,
        data,
        prior,
        grid,
        theta: &eval.theta,
        n: data.n() as f64,
    };
    let (_, _, hess) = obj.full(&eval.x1_hat)?;
    Ok(hess)
}
