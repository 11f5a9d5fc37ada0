//! Derivatives of the trajectory with respect to the initial state, and the
//! lack-of-fit statistic they feed.
//!
//! `Z_i[j, l] = dx_i[j] / dx1[l]` and `W_i[j][l, k] = d2 x_i[j] / dx1[l] dx1[k]`
//! are propagated either by differentiating the discrete one-step map exactly
//! (default; makes the gradient and Hessian of the discrete objective exact,
//! so the Newton solve and the curvature term stay mutually consistent) or by
//! integrating the continuous sensitivity system
//! `dZ/dt = J Z`, `dW_j/dt = sum_u J[j,u] W_u + Z^T H_j Z` with the same
//! one-step method.

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ode::{Method, OdeSystem, TimeGrid};

/// How the sensitivity matrices are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SensMode {
    /// Exact chain rule through each Euler/RK4 stage of the discrete map.
    #[default]
    Discrete,
    /// The continuous sensitivity ODEs, stepped with the same method.
    Continuous,
}

/// First- and second-order trajectory derivatives at every observation time.
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    /// `z[i][(j, l)] = dx_i[j] / dx1[l]`; `z[0] = I_p` exactly.
    pub z: Vec<DMatrix<f64>>,
    /// `w[i][j][(l, k)] = d2 x_i[j] / dx1[l] dx1[k]`; `w[0] = 0` exactly.
    pub w: Vec<Vec<DMatrix<f64>>>,
}

/// The mean lack-of-fit `g`, its gradient and its Hessian in the initial
/// state.
#[derive(Debug, Clone)]
pub struct FitStats {
    pub g: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// States plus sensitivities at the observation times, the unit the Laplace
/// step consumes.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub states: Vec<DVector<f64>>,
    pub sens: SensitivityBundle,
}

/// Anything that can produce the mean function and its derivatives with
/// respect to the initial state: numerical integration of an `OdeSystem`,
/// or an analytic solution where one exists.
pub trait TrajectorySource: Sync {
    fn p(&self) -> usize;

    /// States together with first- and second-order sensitivities.
    fn propagate(
        &self,
        x1: &DVector<f64>,
        theta: &DVector<f64>,
        grid: &TimeGrid,
    ) -> Result<Propagated>;

    /// States only (cheaper; used by line searches).
    fn states_only(
        &self,
        x1: &DVector<f64>,
        theta: &DVector<f64>,
        grid: &TimeGrid,
    ) -> Result<Vec<DVector<f64>>>;

    /// States with first-order sensitivities only (used by optimizer
    /// iterations, which need gradients and a Gauss-Newton curvature but
    /// not the second-order term).
    fn propagate_first(
        &self,
        x1: &DVector<f64>,
        theta: &DVector<f64>,
        grid: &TimeGrid,
    ) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
        let prop = self.propagate(x1, theta, grid)?;
        Ok((prop.states, prop.sens.z))
    }
}

/// Numerical trajectory source: an ODE system stepped by `method` in the
/// requested sensitivity mode.
pub struct OdeTrajectory<'a> {
    pub sys: &'a OdeSystem,
    pub method: Method,
    pub mode: SensMode,
}

impl<'a> OdeTrajectory<'a> {
    pub fn new(sys: &'a OdeSystem, method: Method) -> Self {
        OdeTrajectory {
            sys,
            method,
            mode: SensMode::Discrete,
        }
    }

    pub fn with_mode(mut self, mode: SensMode) -> Self {
        self.mode = mode;
        self
    }
}

impl<'a> TrajectorySource for OdeTrajectory<'a> {
    fn p(&self) -> usize {
        self.sys.p
    }

    fn propagate(
        &self,
        x1: &DVector<f64>,
        theta: &DVector<f64>,
        grid: &TimeGrid,
    ) -> Result<Propagated> {
        propagate_sensitivities(self.sys, x1, theta, grid, self.method, self.mode)
    }

    fn states_only(
        &self,
        x1: &DVector<f64>,
        theta: &DVector<f64>,
        grid: &TimeGrid,
    ) -> Result<Vec<DVector<f64>>> {
        Ok(crate::ode::integrate(self.sys, x1, theta, grid, self.method)?.states)
    }

    fn propagate_first(
        &self,
        x1: &DVector<f64>,
        theta: &DVector<f64>,
        grid: &TimeGrid,
    ) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
        propagate_first_order(self.sys, x1, theta, grid, self.method)
    }
}

/// First-order-only propagation: the state plus `Z' = A Z` per sub-step,
/// never touching the state Hessian.
pub fn propagate_first_order(
    sys: &OdeSystem,
    x1: &DVector<f64>,
    theta: &DVector<f64>,
    grid: &TimeGrid,
    method: Method,
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    match sys.p {
        1 => return static_path::propagate_first::<1>(sys, x1, theta, grid, method),
        2 => return static_path::propagate_first::<2>(sys, x1, theta, grid, method),
        3 => return static_path::propagate_first::<3>(sys, x1, theta, grid, method),
        4 => return static_path::propagate_first::<4>(sys, x1, theta, grid, method),
        _ => {}
    }
    let p = sys.p;
    let n = grid.n();
    let m = grid.m();
    let eye = DMatrix::<f64>::identity(p, p);
    let mut states = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    let mut x = x1.clone();
    let mut z = eye.clone();
    states.push(x.clone());
    zs.push(z.clone());
    for i in 1..n {
        let t_left = grid.times()[i - 1];
        let dt = (grid.times()[i] - t_left) / m as f64;
        for k in 0..m {
            let t = t_left + k as f64 * dt;
            let (nx, a) = match method {
                Method::Euler => {
                    let f = sys.rhs_at(&x, t, theta)?;
                    let j = sys.jac_at(&x, t, theta)?;
                    (&x + f * dt, &eye + j * dt)
                }
                Method::Rk4 => {
                    let half = 0.5 * dt;
                    let k1 = sys.rhs_at(&x, t, theta)?;
                    let kk1 = sys.jac_at(&x, t, theta)?;
                    let x2 = &x + &k1 * half;
                    let k2 = sys.rhs_at(&x2, t + half, theta)?;
                    let kk2 = sys.jac_at(&x2, t + half, theta)? * (&eye + &kk1 * half);
                    let x3 = &x + &k2 * half;
                    let k3 = sys.rhs_at(&x3, t + half, theta)?;
                    let kk3 = sys.jac_at(&x3, t + half, theta)? * (&eye + &kk2 * half);
                    let x4 = &x + &k3 * dt;
                    let k4 = sys.rhs_at(&x4, t + dt, theta)?;
                    let kk4 = sys.jac_at(&x4, t + dt, theta)? * (&eye + &kk3 * dt);
                    (
                        &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0),
                        &eye + (kk1 + kk2 * 2.0 + kk3 * 2.0 + kk4) * (dt / 6.0),
                    )
                }
            };
            z = &a * &z;
            x = nx;
            if !x.iter().all(|v| v.is_finite()) || !z.iter().all(|v| v.is_finite()) {
                return Err(tag(
                    Error::Eval {
                        t: t + dt,
                        state: x.iter().cloned().collect(),
                        interval: None,
                    },
                    i,
                ));
            }
        }
        states.push(x.clone());
        zs.push(z.clone());
    }
    Ok((states, zs))
}

/// Propagate states and sensitivities across the grid.
///
/// State dimensions up to four (every built-in model) take a statically
/// sized fast path; larger systems use the dynamically sized one.
pub fn propagate_sensitivities(
    sys: &OdeSystem,
    x1: &DVector<f64>,
    theta: &DVector<f64>,
    grid: &TimeGrid,
    method: Method,
    mode: SensMode,
) -> Result<Propagated> {
    if x1.len() != sys.p {
        return Err(Error::spec(format!(
            "initial state has dimension {}, system expects {}",
            x1.len(),
            sys.p
        )));
    }
    if mode == SensMode::Discrete {
        match sys.p {
            1 => return static_path::propagate::<1>(sys, x1, theta, grid, method),
            2 => return static_path::propagate::<2>(sys, x1, theta, grid, method),
            3 => return static_path::propagate::<3>(sys, x1, theta, grid, method),
            4 => return static_path::propagate::<4>(sys, x1, theta, grid, method),
            _ => {}
        }
    }
    let p = sys.p;
    let n = grid.n();
    let m = grid.m();
    let mut states = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    let mut ws = Vec::with_capacity(n);
    let mut x = x1.clone();
    let mut z = DMatrix::identity(p, p);
    let mut w = vec![DMatrix::zeros(p, p); p];
    states.push(x.clone());
    zs.push(z.clone());
    ws.push(w.clone());
    for i in 1..n {
        let t_left = grid.times()[i - 1];
        let dt = (grid.times()[i] - t_left) / m as f64;
        for k in 0..m {
            let t = t_left + k as f64 * dt;
            let step = match mode {
                SensMode::Discrete => step_discrete(sys, &x, &z, &w, t, dt, theta, method),
                SensMode::Continuous => step_continuous(sys, &x, &z, &w, t, dt, theta, method),
            };
            let (nx, nz, nw) = step.map_err(|e| tag(e, i))?;
            if !nx.iter().all(|v| v.is_finite())
                || !nz.iter().all(|v| v.is_finite())
                || !nw.iter().all(|m| m.iter().all(|v| v.is_finite()))
            {
                return Err(tag(
                    Error::Eval {
                        t: t + dt,
                        state: nx.iter().cloned().collect(),
                        interval: None,
                    },
                    i,
                ));
            }
            x = nx;
            z = nz;
            w = nw;
        }
        states.push(x.clone());
        zs.push(z.clone());
        ws.push(w.clone());
    }
    Ok(Propagated {
        states,
        sens: SensitivityBundle { z: zs, w: ws },
    })
}

fn tag(e: Error, interval: usize) -> Error {
    match e {
        Error::Eval { t, state, .. } => Error::Eval {
            t,
            state,
            interval: Some(interval),
        },
        other => other,
    }
}

type StepOut = (DVector<f64>, DMatrix<f64>, Vec<DMatrix<f64>>);

/// Derivative of one discrete step through the chain rule.
///
/// With step map `Phi`, `A = dPhi/dx` and `B_j = d2 Phi_j / dx2`, the
/// sensitivities update as `Z' = A Z` and
/// `W'_j = sum_u A[j,u] W_u + Z^T B_j Z`.
#[allow(clippy::too_many_arguments)]
fn step_discrete(
    sys: &OdeSystem,
    x: &DVector<f64>,
    z: &DMatrix<f64>,
    w: &[DMatrix<f64>],
    t: f64,
    dt: f64,
    theta: &DVector<f64>,
    method: Method,
) -> Result<StepOut> {
    let p = sys.p;
    let (x_new, a, b) = match method {
        Method::Euler => {
            let f = sys.rhs_at(x, t, theta)?;
            let j = sys.jac_at(x, t, theta)?;
            let h = sys.hess_at(x, t, theta)?;
            let a = DMatrix::identity(p, p) + &j * dt;
            let b: Vec<DMatrix<f64>> = h.iter().map(|hj| hj * dt).collect();
            (x + f * dt, a, b)
        }
        Method::Rk4 => rk4_with_derivatives(sys, x, t, dt, theta)?,
    };
    let z_new = &a * z;
    let mut w_new = vec![DMatrix::zeros(p, p); p];
    for j in 0..p {
        let mut acc = z.transpose() * &b[j] * z;
        for u in 0..p {
            acc += &w[u] * a[(j, u)];
        }
        w_new[j] = acc;
    }
    Ok((x_new, z_new, w_new))
}

/// One RK4 step together with its exact first and second derivatives with
/// respect to the incoming state.
///
/// Per stage `s` with abscissa shift `c_s`: `x_s = x + c_s dt k_{s-1}`,
/// `D_s = I + c_s dt K_{s-1}`, `K_s = J(x_s) D_s`, and
/// `G_s[j] = D_s^T H_j(x_s) D_s + c_s dt sum_a J(x_s)[j,a] G_{s-1}[a]`.
fn rk4_with_derivatives(
    sys: &OdeSystem,
    x: &DVector<f64>,
    t: f64,
    dt: f64,
    theta: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let p = sys.p;
    let half = 0.5 * dt;
    let eye = DMatrix::<f64>::identity(p, p);

    let k1 = sys.rhs_at(x, t, theta)?;
    let j1 = sys.jac_at(x, t, theta)?;
    let g1 = sys.hess_at(x, t, theta)?;
    let kk1 = j1;

    let x2 = x + &k1 * half;
    let t2 = t + half;
    let k2 = sys.rhs_at(&x2, t2, theta)?;
    let j2 = sys.jac_at(&x2, t2, theta)?;
    let h2 = sys.hess_at(&x2, t2, theta)?;
    let d2 = &eye + &kk1 * half;
    let kk2 = &j2 * &d2;
    let g2 = stage_hessian(&d2, &h2, &j2, &g1, half);

    let x3 = x + &k2 * half;
    let k3 = sys.rhs_at(&x3, t2, theta)?;
    let j3 = sys.jac_at(&x3, t2, theta)?;
    let h3 = sys.hess_at(&x3, t2, theta)?;
    let d3 = &eye + &kk2 * half;
    let kk3 = &j3 * &d3;
    let g3 = stage_hessian(&d3, &h3, &j3, &g2, half);

    let x4 = x + &k3 * dt;
    let t4 = t + dt;
    let k4 = sys.rhs_at(&x4, t4, theta)?;
    let j4 = sys.jac_at(&x4, t4, theta)?;
    let h4 = sys.hess_at(&x4, t4, theta)?;
    let d4 = &eye + &kk3 * dt;
    let kk4 = &j4 * &d4;
    let g4 = stage_hessian(&d4, &h4, &j4, &g3, dt);

    let x_new = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let a = &eye + (kk1 + kk2 * 2.0 + kk3 * 2.0 + kk4) * (dt / 6.0);
    let b: Vec<DMatrix<f64>> = (0..p)
        .map(|j| (&g1[j] + &g2[j] * 2.0 + &g3[j] * 2.0 + &g4[j]) * (dt / 6.0))
        .collect();
    Ok((x_new, a, b))
}

fn stage_hessian(
    d: &DMatrix<f64>,
    h_stage: &[DMatrix<f64>],
    j_stage: &DMatrix<f64>,
    g_prev: &[DMatrix<f64>],
    c_dt: f64,
) -> Vec<DMatrix<f64>> {
    let p = d.nrows();
    (0..p)
        .map(|j| {
            let mut g = d.transpose() * &h_stage[j] * d;
            for a in 0..p {
                g += &g_prev[a] * (c_dt * j_stage[(j, a)]);
            }
            g
        })
        .collect()
}

/// One step of the augmented continuous system `(x, Z, W)` with the same
/// one-step method.
#[allow(clippy::too_many_arguments)]
fn step_continuous(
    sys: &OdeSystem,
    x: &DVector<f64>,
    z: &DMatrix<f64>,
    w: &[DMatrix<f64>],
    t: f64,
    dt: f64,
    theta: &DVector<f64>,
    method: Method,
) -> Result<StepOut> {
    let rhs = |x: &DVector<f64>, z: &DMatrix<f64>, w: &[DMatrix<f64>], t: f64| -> Result<StepOut> {
        let p = sys.p;
        let f = sys.rhs_at(x, t, theta)?;
        let j = sys.jac_at(x, t, theta)?;
        let h = sys.hess_at(x, t, theta)?;
        let dz = &j * z;
        let mut dw = vec![DMatrix::zeros(p, p); p];
        for jj in 0..p {
            let mut acc = z.transpose() * &h[jj] * z;
            for u in 0..p {
                acc += &w[u] * j[(jj, u)];
            }
            dw[jj] = acc;
        }
        Ok((f, dz, dw))
    };
    let axpy = |base: (&DVector<f64>, &DMatrix<f64>, &[DMatrix<f64>]),
                slope: &StepOut,
                c: f64|
     -> StepOut {
        (
            base.0 + &slope.0 * c,
            base.1 + &slope.1 * c,
            base
                .2
                .iter()
                .zip(&slope.2)
                .map(|(bw, sw)| bw + sw * c)
                .collect(),
        )
    };
    match method {
        Method::Euler => {
            let k = rhs(x, z, w, t)?;
            Ok(axpy((x, z, w), &k, dt))
        }
        Method::Rk4 => {
            let half = 0.5 * dt;
            let k1 = rhs(x, z, w, t)?;
            let s2 = axpy((x, z, w), &k1, half);
            let k2 = rhs(&s2.0, &s2.1, &s2.2, t + half)?;
            let s3 = axpy((x, z, w), &k2, half);
            let k3 = rhs(&s3.0, &s3.1, &s3.2, t + half)?;
            let s4 = axpy((x, z, w), &k3, dt);
            let k4 = rhs(&s4.0, &s4.1, &s4.2, t + dt)?;
            let c = dt / 6.0;
            let x_new = x + (&k1.0 + &k2.0 * 2.0 + &k3.0 * 2.0 + &k4.0) * c;
            let z_new = z + (&k1.1 + &k2.1 * 2.0 + &k3.1 * 2.0 + &k4.1) * c;
            let w_new = (0..sys.p)
                .map(|j| &w[j] + (&k1.2[j] + &k2.2[j] * 2.0 + &k3.2[j] * 2.0 + &k4.2[j]) * c)
                .collect();
            Ok((x_new, z_new, w_new))
        }
    }
}

/// Statically dimensioned propagation for small state dimensions: identical
/// arithmetic to the dynamic path, with all stage temporaries on the stack.
mod static_path {
    use nalgebra::{DMatrix, DVector, SMatrix, SVector};

    use super::{tag, Propagated, SensitivityBundle};
    use crate::error::{Error, Result};
    use crate::ode::{Method, OdeSystem, TimeGrid};

    struct Sys<'a, const P: usize> {
        sys: &'a OdeSystem,
        theta: &'a DVector<f64>,
        scratch: DVector<f64>,
    }

    impl<'a, const P: usize> Sys<'a, P> {
        fn new(sys: &'a OdeSystem, theta: &'a DVector<f64>) -> Self {
            Sys {
                sys,
                theta,
                scratch: DVector::zeros(P),
            }
        }

        fn rhs(&mut self, x: &SVector<f64, P>, t: f64) -> Result<SVector<f64, P>> {
            self.scratch.copy_from_slice(x.as_slice());
            let f = self.sys.rhs_at(&self.scratch, t, self.theta)?;
            Ok(SVector::from_column_slice(f.as_slice()))
        }

        fn jac(&mut self, x: &SVector<f64, P>, t: f64) -> Result<SMatrix<f64, P, P>> {
            self.scratch.copy_from_slice(x.as_slice());
            let j = self.sys.jac_at(&self.scratch, t, self.theta)?;
            Ok(SMatrix::from_column_slice(j.as_slice()))
        }

        fn hess(&mut self, x: &SVector<f64, P>, t: f64) -> Result<[SMatrix<f64, P, P>; P]> {
            self.scratch.copy_from_slice(x.as_slice());
            let h = self.sys.hess_at(&self.scratch, t, self.theta)?;
            Ok(std::array::from_fn(|j| SMatrix::from_column_slice(h[j].as_slice())))
        }
    }

    fn eval_error<const P: usize>(t: f64, x: &SVector<f64, P>) -> Error {
        Error::Eval {
            t,
            state: x.iter().cloned().collect(),
            interval: None,
        }
    }

    /// One-step map derivative: `(x', A, B)` with `A = dPhi/dx` and
    /// `B[j] = d2 Phi_j/dx2`.
    #[allow(clippy::type_complexity)]
    fn step_map<const P: usize>(
        sys: &mut Sys<'_, P>,
        x: &SVector<f64, P>,
        t: f64,
        dt: f64,
        method: Method,
    ) -> Result<(SVector<f64, P>, SMatrix<f64, P, P>, [SMatrix<f64, P, P>; P])> {
        match method {
            Method::Euler => {
                let f = sys.rhs(x, t)?;
                let j = sys.jac(x, t)?;
                let h = sys.hess(x, t)?;
                let a = SMatrix::identity() + j * dt;
                let b = std::array::from_fn(|jj| h[jj] * dt);
                Ok((x + f * dt, a, b))
            }
            Method::Rk4 => {
                let half = 0.5 * dt;
                let eye = SMatrix::<f64, P, P>::identity();

                let k1 = sys.rhs(x, t)?;
                let kk1 = sys.jac(x, t)?;
                let g1 = sys.hess(x, t)?;

                let x2 = x + k1 * half;
                let t2 = t + half;
                let k2 = sys.rhs(&x2, t2)?;
                let j2 = sys.jac(&x2, t2)?;
                let h2 = sys.hess(&x2, t2)?;
                let d2 = eye + kk1 * half;
                let kk2 = j2 * d2;
                let g2 = stage_hessian(&d2, &h2, &j2, &g1, half);

                let x3 = x + k2 * half;
                let k3 = sys.rhs(&x3, t2)?;
                let j3 = sys.jac(&x3, t2)?;
                let h3 = sys.hess(&x3, t2)?;
                let d3 = eye + kk2 * half;
                let kk3 = j3 * d3;
                let g3 = stage_hessian(&d3, &h3, &j3, &g2, half);

                let x4 = x + k3 * dt;
                let t4 = t + dt;
                let k4 = sys.rhs(&x4, t4)?;
                let j4 = sys.jac(&x4, t4)?;
                let h4 = sys.hess(&x4, t4)?;
                let d4 = eye + kk3 * dt;
                let kk4 = j4 * d4;
                let g4 = stage_hessian(&d4, &h4, &j4, &g3, dt);

                let x_new = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
                let a = eye + (kk1 + kk2 * 2.0 + kk3 * 2.0 + kk4) * (dt / 6.0);
                let b = std::array::from_fn(|j| {
                    (g1[j] + g2[j] * 2.0 + g3[j] * 2.0 + g4[j]) * (dt / 6.0)
                });
                Ok((x_new, a, b))
            }
        }
    }

    fn stage_hessian<const P: usize>(
        d: &SMatrix<f64, P, P>,
        h_stage: &[SMatrix<f64, P, P>; P],
        j_stage: &SMatrix<f64, P, P>,
        g_prev: &[SMatrix<f64, P, P>; P],
        c_dt: f64,
    ) -> [SMatrix<f64, P, P>; P] {
        std::array::from_fn(|j| {
            let mut g = d.transpose() * h_stage[j] * d;
            for a in 0..P {
                g += g_prev[a] * (c_dt * j_stage[(j, a)]);
            }
            g
        })
    }

    pub fn propagate<const P: usize>(
        sys_dyn: &OdeSystem,
        x1: &DVector<f64>,
        theta: &DVector<f64>,
        grid: &TimeGrid,
        method: Method,
    ) -> Result<Propagated> {
        let mut sys = Sys::<P>::new(sys_dyn, theta);
        let n = grid.n();
        let m = grid.m();
        let mut states = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        let mut ws = Vec::with_capacity(n);
        let mut x = SVector::<f64, P>::from_column_slice(x1.as_slice());
        let mut z = SMatrix::<f64, P, P>::identity();
        let mut w = [SMatrix::<f64, P, P>::zeros(); P];
        let push = |states: &mut Vec<DVector<f64>>,
                    zs: &mut Vec<DMatrix<f64>>,
                    ws: &mut Vec<Vec<DMatrix<f64>>>,
                    x: &SVector<f64, P>,
                    z: &SMatrix<f64, P, P>,
                    w: &[SMatrix<f64, P, P>; P]| {
            states.push(DVector::from_column_slice(x.as_slice()));
            zs.push(DMatrix::from_column_slice(P, P, z.as_slice()));
            ws.push(
                w.iter()
                    .map(|wj| DMatrix::from_column_slice(P, P, wj.as_slice()))
                    .collect(),
            );
        };
        push(&mut states, &mut zs, &mut ws, &x, &z, &w);
        for i in 1..n {
            let t_left = grid.times()[i - 1];
            let dt = (grid.times()[i] - t_left) / m as f64;
            for k in 0..m {
                let t = t_left + k as f64 * dt;
                let (nx, a, b) = step_map(&mut sys, &x, t, dt, method).map_err(|e| tag(e, i))?;
                let z_new = a * z;
                let w_new: [SMatrix<f64, P, P>; P] = std::array::from_fn(|j| {
                    let mut acc = z.transpose() * b[j] * z;
                    for u in 0..P {
                        acc += w[u] * a[(j, u)];
                    }
                    acc
                });
                x = nx;
                z = z_new;
                w = w_new;
                if !x.iter().all(|v| v.is_finite())
                    || !z.iter().all(|v| v.is_finite())
                    || !w.iter().all(|wj| wj.iter().all(|v| v.is_finite()))
                {
                    return Err(tag(eval_error(t + dt, &x), i));
                }
            }
            push(&mut states, &mut zs, &mut ws, &x, &z, &w);
        }
        Ok(Propagated {
            states,
            sens: SensitivityBundle { z: zs, w: ws },
        })
    }

    pub fn propagate_first<const P: usize>(
        sys_dyn: &OdeSystem,
        x1: &DVector<f64>,
        theta: &DVector<f64>,
        grid: &TimeGrid,
        method: Method,
    ) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
        if x1.len() != P {
            return Err(Error::spec(format!(
                "initial state has dimension {}, system expects {P}",
                x1.len()
            )));
        }
        let mut sys = Sys::<P>::new(sys_dyn, theta);
        let n = grid.n();
        let m = grid.m();
        let eye = SMatrix::<f64, P, P>::identity();
        let mut states = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        let mut x = SVector::<f64, P>::from_column_slice(x1.as_slice());
        let mut z = eye;
        states.push(DVector::from_column_slice(x.as_slice()));
        zs.push(DMatrix::from_column_slice(P, P, z.as_slice()));
        for i in 1..n {
            let t_left = grid.times()[i - 1];
            let dt = (grid.times()[i] - t_left) / m as f64;
            for k in 0..m {
                let t = t_left + k as f64 * dt;
                let (nx, a) = match method {
                    Method::Euler => {
                        let f = sys.rhs(&x, t)?;
                        let j = sys.jac(&x, t)?;
                        (x + f * dt, eye + j * dt)
                    }
                    Method::Rk4 => {
                        let half = 0.5 * dt;
                        let k1 = sys.rhs(&x, t)?;
                        let kk1 = sys.jac(&x, t)?;
                        let x2 = x + k1 * half;
                        let k2 = sys.rhs(&x2, t + half)?;
                        let kk2 = sys.jac(&x2, t + half)? * (eye + kk1 * half);
                        let x3 = x + k2 * half;
                        let k3 = sys.rhs(&x3, t + half)?;
                        let kk3 = sys.jac(&x3, t + half)? * (eye + kk2 * half);
                        let x4 = x + k3 * dt;
                        let k4 = sys.rhs(&x4, t + dt)?;
                        let kk4 = sys.jac(&x4, t + dt)? * (eye + kk3 * dt);
                        (
                            x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0),
                            eye + (kk1 + kk2 * 2.0 + kk3 * 2.0 + kk4) * (dt / 6.0),
                        )
                    }
                };
                z = a * z;
                x = nx;
                if !x.iter().all(|v| v.is_finite()) || !z.iter().all(|v| v.is_finite()) {
                    return Err(tag(eval_error(t + dt, &x), i));
                }
            }
            states.push(DVector::from_column_slice(x.as_slice()));
            zs.push(DMatrix::from_column_slice(P, P, z.as_slice()));
        }
        Ok((states, zs))
    }
}

/// Lack-of-fit statistics of a propagated trajectory against observed data:
///
/// `g = (1/n) sum_i |y_i - x_i|^2`,
/// `grad = -(2/n) sum_i Z_i^T (y_i - x_i)`,
/// `hess = (2/n) sum_i [ Z_i^T Z_i + sum_j W_i[j] (x_i[j] - y_i[j]) ]`,
/// symmetrized as `(H + H^T)/2`.
pub fn fit_stats_from(prop: &Propagated, data: &Dataset) -> Result<FitStats> {
    let n = data.n();
    if prop.states.len() != n {
        return Err(Error::spec(format!(
            "trajectory has {} rows, dataset has {n}",
            prop.states.len()
        )));
    }
    let p = prop.states[0].len();
    if data.p() != p {
        return Err(Error::spec(format!(
            "dataset dimension {} does not match state dimension {p}",
            data.p()
        )));
    }
    let mut g = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    for i in 0..n {
        let resid = &prop.states[i] - data.row(i); // x_i - y_i
        g += resid.norm_squared();
        let zi = &prop.sens.z[i];
        grad += zi.transpose() * &resid;
        hess += zi.transpose() * zi;
        for j in 0..p {
            hess += &prop.sens.w[i][j] * resid[j];
        }
    }
    let nf = n as f64;
    g /= nf;
    grad *= 2.0 / nf;
    hess *= 2.0 / nf;
    let hess = (&hess + hess.transpose()) * 0.5;
    Ok(FitStats { g, grad, hess })
}

/// Convenience wrapper: propagate then accumulate the fit statistics.
#[allow(clippy::too_many_arguments)]
pub fn fit_stats(
    sys: &OdeSystem,
    x1: &DVector<f64>,
    theta: &DVector<f64>,
    data: &Dataset,
    grid: &TimeGrid,
    method: Method,
    mode: SensMode,
) -> Result<FitStats> {
    if data.times() != grid.times() {
        return Err(Error::spec("dataset times must equal the integration grid times"));
    }
    let prop = propagate_sensitivities(sys, x1, theta, grid, method, mode)?;
    fit_stats_from(&prop, data)
}
