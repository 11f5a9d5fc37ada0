//! Fixed-step one-step integration of first-order ODE systems.
//!
//! The mean function of the regression model is the flow of
//! `dx/dt = f(x, t; theta)`. Trajectories are produced at the observation
//! times by `m` equal sub-steps of Euler or classical fourth-order
//! Runge-Kutta per observation interval. There is deliberately no adaptive
//! step-size control: the refinement parameter `m` is the knob the rest of
//! the pipeline reasons about.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// The one-step method used to advance the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::spec(format!("unknown solver '{other}' (euler|rk4)"))),
        }
    }
}

type RhsFn = dyn Fn(&DVector<f64>, f64, &DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>, f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync;
type HessFn = dyn Fn(&DVector<f64>, f64, &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync;

/// A first-order ODE system `dx/dt = f(x, t; theta)` with its derivatives
/// with respect to the state.
///
/// `jac` returns the `p x p` matrix with entry `(j, u) = df_j/dx_u`. `hess`
/// returns one `p x p` matrix per output component `j` with entry
/// `(u, v) = d2 f_j / dx_u dx_v`; when absent it is reconstructed by central
/// finite differences of `jac`.
pub struct OdeSystem {
    /// State dimension.
    pub p: usize,
    /// Parameter dimension.
    pub q: usize,
    rhs: Box<RhsFn>,
    jac: Box<JacFn>,
    hess: Option<Box<HessFn>>,
    /// Box constraints on theta (open intervals).
    pub theta_support: Vec<(f64, f64)>,
}

impl OdeSystem {
    pub fn new(
        p: usize,
        q: usize,
        rhs: impl Fn(&DVector<f64>, f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jac: impl Fn(&DVector<f64>, f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        theta_support: Vec<(f64, f64)>,
    ) -> Self {
        assert!(p >= 1 && q >= 1, "state and parameter dimensions must be positive");
        assert_eq!(theta_support.len(), q, "one support interval per parameter");
        OdeSystem {
            p,
            q,
            rhs: Box::new(rhs),
            jac: Box::new(jac),
            hess: None,
            theta_support,
        }
    }

    /// Attach an analytic state Hessian.
    pub fn with_hess(
        mut self,
        hess: impl Fn(&DVector<f64>, f64, &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Self {
        self.hess = Some(Box::new(hess));
        self
    }

    /// Evaluate the right-hand side, rejecting non-finite output.
    pub fn rhs_at(&self, x: &DVector<f64>, t: f64, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let f = (self.rhs)(x, t, theta);
        debug_assert_eq!(f.len(), self.p);
        if f.iter().all(|v| v.is_finite()) {
            Ok(f)
        } else {
            Err(eval_error(t, x))
        }
    }

    /// Evaluate the state Jacobian, rejecting non-finite output.
    pub fn jac_at(&self, x: &DVector<f64>, t: f64, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let j = (self.jac)(x, t, theta);
        debug_assert_eq!((j.nrows(), j.ncols()), (self.p, self.p));
        if j.iter().all(|v| v.is_finite()) {
            Ok(j)
        } else {
            Err(eval_error(t, x))
        }
    }

    /// Evaluate the state Hessian (analytic if provided, otherwise central
    /// finite differences of the Jacobian with step `1e-5 * max(1, |x_v|)`).
    /// Each component matrix is symmetrized.
    pub fn hess_at(
        &self,
        x: &DVector<f64>,
        t: f64,
        theta: &DVector<f64>,
    ) -> Result<Vec<DMatrix<f64>>> {
        let mut h = match &self.hess {
            Some(f) => {
                let h = f(x, t, theta);
                debug_assert_eq!(h.len(), self.p);
                for hj in &h {
                    if !hj.iter().all(|v| v.is_finite()) {
                        return Err(eval_error(t, x));
                    }
                }
                h
            }
            None => self.hess_fd(x, t, theta)?,
        };
        for hj in &mut h {
            for u in 0..self.p {
                for v in (u + 1)..self.p {
                    let avg = 0.5 * (hj[(u, v)] + hj[(v, u)]);
                    hj[(u, v)] = avg;
                    hj[(v, u)] = avg;
                }
            }
        }
        Ok(h)
    }

    fn hess_fd(&self, x: &DVector<f64>, t: f64, theta: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        let p = self.p;
        let mut h = vec![DMatrix::zeros(p, p); p];
        for v in 0..p {
            let step = 1e-5 * x[v].abs().max(1.0);
            let mut xp = x.clone();
            xp[v] += step;
            let mut xm = x.clone();
            xm[v] -= step;
            let jp = self.jac_at(&xp, t, theta)?;
            let jm = self.jac_at(&xm, t, theta)?;
            for j in 0..p {
                for u in 0..p {
                    h[j][(u, v)] = (jp[(j, u)] - jm[(j, u)]) / (2.0 * step);
                }
            }
        }
        Ok(h)
    }

    /// True when theta lies strictly inside the support box.
    pub fn theta_in_support(&self, theta: &DVector<f64>) -> bool {
        theta.len() == self.q
            && theta
                .iter()
                .zip(&self.theta_support)
                .all(|(v, (lo, hi))| v.is_finite() && *v > *lo && *v < *hi)
    }
}

fn eval_error(t: f64, x: &DVector<f64>) -> Error {
    Error::Eval {
        t,
        state: x.iter().cloned().collect(),
        interval: None,
    }
}

/// Observation times together with the sub-step count `m`.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    times: Vec<f64>,
    m: usize,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, m: usize) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::spec("time grid must contain at least one point"));
        }
        if m == 0 {
            return Err(Error::spec("sub-step count m must be at least 1"));
        }
        for i in 1..times.len() {
            if !(times[i] > times[i - 1]) {
                return Err(Error::spec(format!(
                    "time grid must be strictly increasing (violated at index {i})"
                )));
            }
        }
        Ok(TimeGrid { times, m })
    }

    /// Uniform grid `t_i = t1 + (i-1) h`, `i = 1..=n`.
    pub fn uniform(t1: f64, h: f64, n: usize) -> Result<Self> {
        if h <= 0.0 {
            return Err(Error::spec("spacing h must be positive"));
        }
        let times = (0..n).map(|i| t1 + h * i as f64).collect();
        TimeGrid::new(times, 1)
    }

    pub fn with_m(mut self, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::spec("sub-step count m must be at least 1"));
        }
        self.m = m;
        Ok(self)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Maximum spacing between consecutive observation times.
    pub fn h(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// States at the observation times, tagged with how they were produced.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub method: Method,
    pub m: usize,
}

/// One Euler step: `x + dt * f(x, t; theta)`.
pub fn step_euler(
    sys: &OdeSystem,
    x: &DVector<f64>,
    t: f64,
    dt: f64,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let f = sys.rhs_at(x, t, theta)?;
    Ok(x + f * dt)
}

/// One classical RK4 step with the conventional stage scaling
/// `k2 = f(x + (dt/2) k1, t + dt/2)` and update
/// `x + (dt/6)(k1 + 2 k2 + 2 k3 + k4)`.
pub fn step_rk4(
    sys: &OdeSystem,
    x: &DVector<f64>,
    t: f64,
    dt: f64,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let half = 0.5 * dt;
    let k1 = sys.rhs_at(x, t, theta)?;
    let k2 = sys.rhs_at(&(x + &k1 * half), t + half, theta)?;
    let k3 = sys.rhs_at(&(x + &k2 * half), t + half, theta)?;
    let k4 = sys.rhs_at(&(x + &k3 * dt), t + dt, theta)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Integrate across the grid, splitting each observation interval into
/// `grid.m()` equal sub-steps. The first row is `x1` exactly.
pub fn integrate(
    sys: &OdeSystem,
    x1: &DVector<f64>,
    theta: &DVector<f64>,
    grid: &TimeGrid,
    method: Method,
) -> Result<Trajectory> {
    if x1.len() != sys.p {
        return Err(Error::spec(format!(
            "initial state has dimension {}, system expects {}",
            x1.len(),
            sys.p
        )));
    }
    if !x1.iter().all(|v| v.is_finite()) {
        return Err(eval_error(grid.times()[0], x1));
    }
    let m = grid.m();
    let mut states = Vec::with_capacity(grid.n());
    states.push(x1.clone());
    let mut x = x1.clone();
    for i in 1..grid.n() {
        let t_left = grid.times()[i - 1];
        let dt = (grid.times()[i] - t_left) / m as f64;
        for k in 0..m {
            let t = t_left + k as f64 * dt;
            let stepped = match method {
                Method::Euler => step_euler(sys, &x, t, dt, theta),
                Method::Rk4 => step_rk4(sys, &x, t, dt, theta),
            };
            x = stepped.map_err(|e| tag_interval(e, i))?;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(tag_interval(eval_error(t + dt, &x), i));
            }
        }
        states.push(x.clone());
    }
    Ok(Trajectory { states, method, m })
}

fn tag_interval(e: Error, interval: usize) -> Error {
    match e {
        Error::Eval { t, state, .. } => Error::Eval {
            t,
            state,
            interval: Some(interval),
        },
        other => other,
    }
}
