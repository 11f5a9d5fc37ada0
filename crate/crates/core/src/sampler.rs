//! Discrete posterior construction and sampling.
//!
//! The parameter is reparametrized as `theta(z) = theta0 + U D^{1/2} z`
//! around a center with finite-difference curvature. A coarse sweep bounds
//! the region with non-negligible mass, a fine lattice over that region
//! carries the normalized discrete posterior, and draws are either iid
//! categorical (small `q`) or a griddy Gibbs scan over per-axis grids
//! (large `q`). `refine_m` drives the sub-step refinement loop on top.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaDist};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::laplace::FailTag;
use crate::math;

/// One posterior evaluation at a grid point. `u_stat` is the optimized
/// penalized lack of fit feeding the Gamma conditional of `tau2`; toy
/// posteriors that never sample `tau2` may leave it at zero.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub log_post: f64,
    pub u_stat: f64,
    /// Inner minimizer, used to warm-start neighboring evaluations.
    pub x1_hat: Option<DVector<f64>>,
    pub fail: Option<FailTag>,
}

impl PointEval {
    pub fn from_log_post(log_post: f64) -> Self {
        PointEval {
            log_post,
            u_stat: 0.0,
            x1_hat: None,
            fail: None,
        }
    }
}

/// Posterior evaluator over raw `theta`, with an optional warm start for
/// the inner optimization.
pub trait PosteriorEval: Sync {
    fn eval(&self, theta: &DVector<f64>, warm: Option<&DVector<f64>>) -> PointEval;
}

impl<F> PosteriorEval for F
where
    F: Fn(&DVector<f64>, Option<&DVector<f64>>) -> PointEval + Sync,
{
    fn eval(&self, theta: &DVector<f64>, warm: Option<&DVector<f64>>) -> PointEval {
        self(theta, warm)
    }
}

/// Wrap a plain log-posterior function as an evaluator (tests, toys).
pub struct LogPostFn<F: Fn(&DVector<f64>) -> f64 + Sync>(pub F);

impl<F: Fn(&DVector<f64>) -> f64 + Sync> PosteriorEval for LogPostFn<F> {
    fn eval(&self, theta: &DVector<f64>, _warm: Option<&DVector<f64>>) -> PointEval {
        PointEval::from_log_post((self.0)(theta))
    }
}

/// Eigensystem of the approximate posterior covariance at the center.
#[derive(Debug, Clone)]
pub struct PosteriorCurvature {
    /// Eigenvectors of `Sigma_hat` (columns).
    pub vectors: DMatrix<f64>,
    /// Eigenvalues of `Sigma_hat`, all positive after repair.
    pub values: DVector<f64>,
    /// How many Hessian eigenvalues needed the repair rule.
    pub repaired: usize,
}

impl PosteriorCurvature {
    pub fn sigma_hat(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }
}

/// Negative Hessian of the log posterior at `theta0` by central finite
/// differences (relative step `1e-4 * max(1, |theta0_i|)`), with negative
/// eigenvalues replaced by the smallest positive one, inverted through the
/// eigensystem.
pub fn hessian_center<E: PosteriorEval + ?Sized>(
    eval: &E,
    theta0: &DVector<f64>,
) -> Result<PosteriorCurvature> {
    let q = theta0.len();
    let steps: Vec<f64> = (0..q).map(|i| 1e-4 * theta0[i].abs().max(1.0)).collect();
    let lp = |theta: &DVector<f64>| -> Result<f64> {
        let v = eval.eval(theta, None).log_post;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::spec(format!(
                "log posterior not finite near the center (theta = {:?})",
                theta.as_slice()
            )))
        }
    };
    let l0 = lp(theta0)?;
    let mut h = DMatrix::zeros(q, q);
    for i in 0..q {
        let mut tp = theta0.clone();
        tp[i] += steps[i];
        let mut tm = theta0.clone();
        tm[i] -= steps[i];
        h[(i, i)] = -(lp(&tp)? - 2.0 * l0 + lp(&tm)?) / (steps[i] * steps[i]);
    }
    for i in 0..q {
        for j in (i + 1)..q {
            let shifted = |si: f64, sj: f64| -> Result<f64> {
                let mut t = theta0.clone();
                t[i] += si * steps[i];
                t[j] += sj * steps[j];
                lp(&t)
            };
            let v = -(shifted(1.0, 1.0)? - shifted(1.0, -1.0)? - shifted(-1.0, 1.0)?
                + shifted(-1.0, -1.0)?)
                / (4.0 * steps[i] * steps[j]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(h);
    let min_pos = eig
        .eigenvalues
        .iter()
        .cloned()
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !min_pos.is_finite() {
        return Err(Error::NoCurvature);
    }
    let mut repaired = 0;
    let values = DVector::from_fn(q, |i, _| {
        let v = eig.eigenvalues[i];
        let fixed = if v > 0.0 {
            v
        } else {
            repaired += 1;
            min_pos
        };
        1.0 / fixed
    });
    Ok(PosteriorCurvature {
        vectors: eig.eigenvectors,
        values,
        repaired,
    })
}

/// The reparametrized lattice specification.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub theta0: DVector<f64>,
    pub curvature: PosteriorCurvature,
    /// Half-count of coarse intervals per axis.
    pub m1: usize,
    /// Half-count of fine intervals per axis.
    pub m2: usize,
    /// Mode-normalized mass threshold for range finding.
    pub eta: f64,
    /// Per-axis `[A_i, B_i]` in z-space, set by `find_ranges`.
    pub ranges: Option<Vec<(f64, f64)>>,
}

impl GridSpec {
    pub fn new(theta0: DVector<f64>, curvature: PosteriorCurvature, m1: usize, m2: usize, eta: f64) -> Self {
        GridSpec {
            theta0,
            curvature,
            m1,
            m2,
            eta,
            ranges: None,
        }
    }

    pub fn q(&self) -> usize {
        self.theta0.len()
    }

    pub fn theta_of_z(&self, z: &DVector<f64>) -> DVector<f64> {
        let scaled = DVector::from_fn(self.q(), |i, _| self.curvature.values[i].sqrt() * z[i]);
        &self.theta0 + &self.curvature.vectors * scaled
    }

    pub fn z_of_theta(&self, theta: &DVector<f64>) -> DVector<f64> {
        let rotated = self.curvature.vectors.transpose() * (theta - &self.theta0);
        DVector::from_fn(self.q(), |i, _| rotated[i] / self.curvature.values[i].sqrt())
    }
}

/// Outcome of the coarse range-finding sweep.
#[derive(Debug, Clone)]
pub struct RangeResult {
    pub ranges: Vec<(f64, f64)>,
    /// Number of box doublings performed.
    pub expansions: usize,
    /// Axes whose range collapsed and was widened to one coarse cell.
    pub widened_axes: Vec<usize>,
    /// Coarse evaluations spent.
    pub evals: usize,
}

/// Bound the posterior mass per axis on the coarse lattice.
///
/// The sweep covers `[-L, L]^q` with `2 m1 + 1` points per axis starting at
/// `L = 4`. Masses are normalized so the best point is 1; `[A_i, B_i]` are
/// the extreme `z_i` with normalized mass at least `eta`. The box is doubled
/// (at most twice) when the best point sits on the boundary or an axis
/// range collapses; an axis still collapsed after the last expansion is
/// widened to one coarse cell around its best point.
pub fn find_ranges<E: PosteriorEval + ?Sized>(eval: &E, spec: &GridSpec) -> Result<RangeResult> {
    let q = spec.q();
    let m1 = spec.m1;
    let per_axis = 2 * m1 + 1;
    let mut scale = 4.0;
    let mut expansions = 0usize;
    let mut evals = 0usize;
    loop {
        let axis: Vec<f64> = (0..per_axis)
            .map(|j| -scale + j as f64 * (scale / m1 as f64))
            .collect();
        let total = per_axis.pow(q as u32);
        let log_posts: Vec<f64> = (0..total)
            .into_par_iter()
            .map(|idx| {
                let z = z_of_index(idx, &vec![axis.clone(); q]);
                eval.eval(&spec.theta_of_z(&z), None).log_post
            })
            .collect();
        evals += total;
        let (best_idx, best) = log_posts
            .iter()
            .cloned()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
            .expect("non-empty grid");
        if !best.is_finite() {
            return Err(Error::NotLocalized { expansions });
        }
        let best_multi = multi_index(best_idx, per_axis, q);
        let mode_on_boundary = best_multi.iter().any(|&j| j == 0 || j == per_axis - 1);
        if mode_on_boundary {
            if expansions < 2 {
                scale *= 2.0;
                expansions += 1;
                continue;
            }
            return Err(Error::NotLocalized { expansions });
        }
        let log_eta = spec.eta.ln();
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); q];
        for (idx, &lp) in log_posts.iter().enumerate() {
            if lp - best >= log_eta {
                let mi = multi_index(idx, per_axis, q);
                for i in 0..q {
                    let zi = axis[mi[i]];
                    if zi < ranges[i].0 {
                        ranges[i].0 = zi;
                    }
                    if zi > ranges[i].1 {
                        ranges[i].1 = zi;
                    }
                }
            }
        }
        let degenerate: Vec<usize> = (0..q).filter(|&i| ranges[i].0 >= ranges[i].1).collect();
        if !degenerate.is_empty() && expansions < 2 {
            scale *= 2.0;
            expansions += 1;
            continue;
        }
        let mut widened = Vec::new();
        let cell = scale / m1 as f64;
        for &i in &degenerate {
            let center = if ranges[i].0.is_finite() {
                ranges[i].0
            } else {
                axis[best_multi[i]]
            };
            ranges[i] = (center - 0.5 * cell, center + 0.5 * cell);
            widened.push(i);
        }
        return Ok(RangeResult {
            ranges,
            expansions,
            widened_axes: widened,
            evals,
        });
    }
}

fn multi_index(mut idx: usize, per_axis: usize, q: usize) -> Vec<usize> {
    let mut out = vec![0usize; q];
    for i in (0..q).rev() {
        out[i] = idx % per_axis;
        idx /= per_axis;
    }
    out
}

fn z_of_index(idx: usize, axes: &[Vec<f64>]) -> DVector<f64> {
    let q = axes.len();
    let mut rem = idx;
    let mut z = DVector::zeros(q);
    for i in (0..q).rev() {
        let len = axes[i].len();
        z[i] = axes[i][rem % len];
        rem /= len;
    }
    z
}

/// One lattice point of the discrete posterior.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub z: DVector<f64>,
    pub theta: DVector<f64>,
    pub log_post: f64,
    pub mass: f64,
    pub u_stat: f64,
}

/// The discrete posterior over the fine lattice.
#[derive(Debug, Clone)]
pub struct PosteriorGrid {
    pub points: Vec<GridPoint>,
    pub log_norm: f64,
    /// Points whose evaluation failed numerically (zero mass).
    pub n_failed: usize,
    /// Points outside the prior support (zero mass, expected at box edges).
    pub n_out_of_support: usize,
}

impl PosteriorGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Posterior mean of theta under the discrete masses.
    pub fn mean(&self) -> DVector<f64> {
        let q = self.points[0].theta.len();
        let mut mean = DVector::zeros(q);
        for p in &self.points {
            mean += &p.theta * p.mass;
        }
        mean
    }
}

/// Guard against accidentally enormous lattices.
const MAX_GRID_POINTS: usize = 10_000_000;

/// Evaluate the fine lattice over the ranges in `spec` and normalize.
///
/// Each axis divides `[A_i, B_i]` into `2 m2` equal intervals. Evaluation
/// runs row-parallel with a deterministic reduction: within a row (last
/// axis) points are swept outward from the center so each evaluation can
/// warm-start from its inner neighbor, and rows are independent.
pub fn build_grid<E: PosteriorEval + ?Sized>(eval: &E, spec: &GridSpec) -> Result<PosteriorGrid> {
    let ranges = spec
        .ranges
        .as_ref()
        .ok_or_else(|| Error::spec("build_grid requires ranges; run find_ranges first"))?;
    let q = spec.q();
    let per_axis = 2 * spec.m2 + 1;
    let total = per_axis
        .checked_pow(q as u32)
        .filter(|&t| t <= MAX_GRID_POINTS)
        .ok_or_else(|| {
            Error::spec(format!(
                "grid of {per_axis}^{q} points exceeds {MAX_GRID_POINTS}; use the griddy Gibbs sampler"
            ))
        })?;
    let axes: Vec<Vec<f64>> = ranges
        .iter()
        .map(|&(a, b)| {
            (0..per_axis)
                .map(|j| a + j as f64 * ((b - a) / (2 * spec.m2) as f64))
                .collect()
        })
        .collect();

    let rows = total / per_axis;
    // Index of the innermost-axis point closest to z = 0, the sweep origin.
    let start = axes[q - 1]
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);

    let evals: Vec<Vec<PointEval>> = (0..rows)
        .into_par_iter()
        .map(|row| {
            let mut out: Vec<Option<PointEval>> = vec![None; per_axis];
            let base = row * per_axis;
            let mut sweep = |indices: &mut dyn Iterator<Item = usize>| {
                let mut warm: Option<DVector<f64>> = None;
                for j in indices {
                    let z = z_of_index(base + j, &axes);
                    let theta = spec.theta_of_z(&z);
                    let pe = eval.eval(&theta, warm.as_ref());
                    if let Some(x) = &pe.x1_hat {
                        warm = Some(x.clone());
                    }
                    out[j] = Some(pe);
                }
            };
            sweep(&mut (start..per_axis));
            sweep(&mut (0..start).rev());
            out.into_iter().map(|pe| pe.expect("row fully swept")).collect()
        })
        .collect();

    let mut points = Vec::with_capacity(total);
    let mut n_failed = 0usize;
    let mut n_out_of_support = 0usize;
    let mut log_masses = Vec::with_capacity(total);
    for (row, row_evals) in evals.iter().enumerate() {
        for (j, pe) in row_evals.iter().enumerate() {
            let idx = row * per_axis + j;
            let z = z_of_index(idx, &axes);
            let theta = spec.theta_of_z(&z);
            match pe.fail {
                Some(FailTag::OutOfSupport) => n_out_of_support += 1,
                Some(_) => n_failed += 1,
                None => {}
            }
            log_masses.push(pe.log_post);
            points.push(GridPoint {
                z,
                theta,
                log_post: pe.log_post,
                mass: 0.0,
                u_stat: pe.u_stat,
            });
        }
    }
    let log_norm = math::log_sum_exp(&log_masses);
    let masses = math::normalize_log_masses(&log_masses)?;
    for (p, m) in points.iter_mut().zip(masses) {
        p.mass = m;
    }
    Ok(PosteriorGrid {
        points,
        log_norm,
        n_failed,
        n_out_of_support,
    })
}

/// How a sample set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMethod {
    Grid,
    GriddyGibbs,
}

impl SampleMethod {
    pub fn name(self) -> &'static str {
        match self {
            SampleMethod::Grid => "grid",
            SampleMethod::GriddyGibbs => "griddy-gibbs",
        }
    }
}

/// Posterior draws of `(theta, tau2)` with their provenance.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub draws: Vec<(DVector<f64>, f64)>,
    pub seed: u64,
    pub method: SampleMethod,
    pub m: usize,
    pub elapsed_s: f64,
}

impl SampleSet {
    /// Column-major view: theta components, then tau2, then sigma2.
    pub fn column(&self, idx: usize) -> Vec<f64> {
        let q = self.draws[0].0.len();
        self.draws
            .iter()
            .map(|(theta, tau2)| {
                if idx < q {
                    theta[idx]
                } else if idx == q {
                    *tau2
                } else {
                    1.0 / *tau2
                }
            })
            .collect()
    }
}

/// Draw `n` iid samples from the discrete posterior, with a Gamma draw of
/// `tau2` conditional on each sampled point: shape `a_star = np/2 + a`,
/// rate `u/2 + b`.
pub fn grid_sample(
    grid: &PosteriorGrid,
    n: usize,
    seed: u64,
    a_star: f64,
    b_prior: f64,
    m: usize,
) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::spec("at least one draw is required"));
    }
    let start = std::time::Instant::now();
    let mut cum = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    for p in &grid.points {
        acc += p.mass;
        cum.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::ZeroMass);
    }
    let last_positive = grid
        .points
        .iter()
        .rposition(|p| p.mass > 0.0)
        .ok_or(Error::ZeroMass)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let coin: f64 = rng.gen::<f64>() * acc;
        let idx = cum.partition_point(|&c| c <= coin).min(last_positive);
        let point = &grid.points[idx];
        let rate = 0.5 * point.u_stat + b_prior;
        let gamma = GammaDist::new(a_star, 1.0 / rate)
            .map_err(|e| Error::spec(format!("invalid gamma conditional: {e}")))?;
        let tau2 = gamma.sample(&mut rng);
        draws.push((point.theta.clone(), tau2));
    }
    Ok(SampleSet {
        draws,
        seed,
        method: SampleMethod::Grid,
        m,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Per-axis griddy grids in raw theta coordinates: equal-width points over
/// `theta0_i ± 4 sqrt(Sigma_hat_ii)` clipped to the support box.
pub fn griddy_axes(
    theta0: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    support: &[(f64, f64)],
    points_per_axis: usize,
) -> Result<Vec<Vec<f64>>> {
    if points_per_axis < 1 {
        return Err(Error::spec("need at least one grid point per axis"));
    }
    let q = theta0.len();
    let mut axes = Vec::with_capacity(q);
    for i in 0..q {
        let sd = sigma_hat[(i, i)].max(0.0).sqrt();
        let lo = (theta0[i] - 4.0 * sd).max(support[i].0 + 1e-12 * (1.0 + support[i].0.abs()));
        let hi = (theta0[i] + 4.0 * sd).min(support[i].1 - 1e-12 * (1.0 + support[i].1.abs()));
        if !(lo < hi) {
            return Err(Error::spec(format!(
                "axis {i} grid is empty after clipping to the support box"
            )));
        }
        let axis = if points_per_axis == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..points_per_axis)
                .map(|j| lo + j as f64 * ((hi - lo) / (points_per_axis - 1) as f64))
                .collect()
        };
        axes.push(axis);
    }
    Ok(axes)
}

/// Griddy Gibbs: coordinate-wise scans where each coordinate is redrawn
/// from its normalized full conditional restricted to the axis grid.
///
/// Runs `ceil(0.1 n thin)` burn-in scans, then `n * thin` recorded scans,
/// keeping every `thin`-th state; `tau2` is drawn for each retained state
/// from its Gamma conditional. `parallel_conditionals` evaluates the axis
/// candidates of each update concurrently (deterministic either way).
#[allow(clippy::too_many_arguments)]
pub fn griddy_gibbs<E: PosteriorEval + ?Sized>(
    eval: &E,
    axes: &[Vec<f64>],
    init: &DVector<f64>,
    n: usize,
    thin: usize,
    seed: u64,
    a_star: f64,
    b_prior: f64,
    m: usize,
    parallel_conditionals: bool,
) -> Result<SampleSet> {
    if n == 0 || thin == 0 {
        return Err(Error::spec("need n >= 1 retained draws and thin >= 1"));
    }
    let q = axes.len();
    if init.len() != q {
        return Err(Error::spec("init dimension does not match axis count"));
    }
    let start = std::time::Instant::now();
    // Snap the initial state onto the lattice.
    let mut cur_idx: Vec<usize> = (0..q)
        .map(|i| {
            axes[i]
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1 - init[i])
                        .abs()
                        .partial_cmp(&(b.1 - init[i]).abs())
                        .unwrap()
                })
                .map(|(j, _)| j)
                .unwrap()
        })
        .collect();
    let mut cur_theta = DVector::from_fn(q, |i, _| axes[i][cur_idx[i]]);
    let mut cur_x1: Option<DVector<f64>> = None;
    let mut cur_u = 0.0f64;

    let burn = (n * thin).div_ceil(10);
    let total_scans = burn + n * thin;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n);
    let mut recorded = 0usize;

    // The chain revisits lattice states constantly; memoize evaluations by
    // index tuple (bounded; the posterior is deterministic per state).
    const MEMO_CAP: usize = 1 << 21;
    let mut memo: std::collections::HashMap<Vec<u32>, (f64, f64)> =
        std::collections::HashMap::new();

    for scan in 0..total_scans {
        for coord in 0..q {
            let mut keys: Vec<Vec<u32>> = Vec::with_capacity(axes[coord].len());
            for k in 0..axes[coord].len() {
                let mut key: Vec<u32> = cur_idx.iter().map(|&i| i as u32).collect();
                key[coord] = k as u32;
                keys.push(key);
            }
            let missing: Vec<usize> = (0..axes[coord].len())
                .filter(|k| !memo.contains_key(&keys[*k]))
                .collect();
            let fresh: Vec<(usize, PointEval)> = if parallel_conditionals && missing.len() > 1 {
                missing
                    .par_iter()
                    .map(|&k| {
                        let mut theta = cur_theta.clone();
                        theta[coord] = axes[coord][k];
                        (k, eval.eval(&theta, cur_x1.as_ref()))
                    })
                    .collect()
            } else {
                missing
                    .iter()
                    .map(|&k| {
                        let mut theta = cur_theta.clone();
                        theta[coord] = axes[coord][k];
                        (k, eval.eval(&theta, cur_x1.as_ref()))
                    })
                    .collect()
            };
            for (k, pe) in &fresh {
                if memo.len() < MEMO_CAP {
                    memo.insert(keys[*k].clone(), (pe.log_post, pe.u_stat));
                }
                if let Some(x) = &pe.x1_hat {
                    cur_x1 = Some(x.clone());
                }
            }
            let lookup = |k: usize| -> (f64, f64) {
                if let Some(v) = memo.get(&keys[k]) {
                    *v
                } else {
                    fresh
                        .iter()
                        .find(|(fk, _)| *fk == k)
                        .map(|(_, pe)| (pe.log_post, pe.u_stat))
                        .expect("candidate evaluated")
                }
            };
            let log_masses: Vec<f64> = (0..axes[coord].len()).map(|k| lookup(k).0).collect();
            let masses = math::normalize_log_masses(&log_masses)
                .map_err(|_| Error::StuckCoordinate { coord })?;
            let coin: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = masses.len() - 1;
            for (k, &mk) in masses.iter().enumerate() {
                acc += mk;
                if coin < acc {
                    chosen = k;
                    break;
                }
            }
            cur_idx[coord] = chosen;
            cur_theta[coord] = axes[coord][chosen];
            cur_u = lookup(chosen).1;
        }
        if scan >= burn && (scan - burn + 1) % thin == 0 && recorded < n {
            let rate = 0.5 * cur_u + b_prior;
            let gamma = GammaDist::new(a_star, 1.0 / rate)
                .map_err(|e| Error::spec(format!("invalid gamma conditional: {e}")))?;
            let tau2 = gamma.sample(&mut rng);
            draws.push((cur_theta.clone(), tau2));
            recorded += 1;
        }
    }
    Ok(SampleSet {
        draws,
        seed,
        method: SampleMethod::GriddyGibbs,
        m,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Outcome of the sub-step refinement loop.
#[derive(Debug, Clone)]
pub struct RefineResult {
    pub chosen_m: usize,
    /// `(m, posterior mean)` for every level evaluated.
    pub history: Vec<(usize, DVector<f64>)>,
    /// False when the sequence ran out before stabilizing.
    pub stabilized: bool,
}

/// Run the grid posterior at successive `m` until the posterior mean moves
/// by less than `rel_tol` in every component; the earlier level of the first
/// stable pair is chosen.
pub fn refine_m(
    mut posterior_mean_at: impl FnMut(usize) -> Result<DVector<f64>>,
    m_sequence: &[usize],
    rel_tol: f64,
) -> Result<RefineResult> {
    if m_sequence.is_empty() {
        return Err(Error::spec("m sequence must be non-empty"));
    }
    if m_sequence.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::spec("m sequence must be strictly increasing"));
    }
    let mut history: Vec<(usize, DVector<f64>)> = Vec::new();
    for &m in m_sequence {
        let mean = posterior_mean_at(m)?;
        if let Some((prev_m, prev)) = history.last() {
            let stable = (0..mean.len()).all(|j| {
                (mean[j] - prev[j]).abs() / mean[j].abs().max(1e-12) < rel_tol
            });
            if stable {
                let chosen = *prev_m;
                history.push((m, mean));
                return Ok(RefineResult {
                    chosen_m: chosen,
                    history,
                    stabilized: true,
                });
            }
        }
        history.push((m, mean));
    }
    Ok(RefineResult {
        chosen_m: *m_sequence.last().unwrap(),
        history,
        stabilized: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn identity_curvature(q: usize) -> PosteriorCurvature {
        PosteriorCurvature {
            vectors: DMatrix::identity(q, q),
            values: DVector::from_element(q, 1.0),
            repaired: 0,
        }
    }

    #[test]
    fn hessian_center_inverts_exact_quadratic() {
        // logpost = -1/2 (theta - t0)' Q (theta - t0) with known Q.
        let t0 = DVector::from_vec(vec![1.0, -2.0]);
        let q_mat = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]);
        let f = {
            let t0 = t0.clone();
            let q_mat = q_mat.clone();
            LogPostFn(move |theta: &DVector<f64>| {
                let d = theta - &t0;
                -0.5 * (d.transpose() * &q_mat * &d)[(0, 0)]
            })
        };
        let curv = hessian_center(&f, &t0).unwrap();
        let sigma = curv.sigma_hat();
        let expected = q_mat.try_inverse().unwrap();
        assert!((sigma - expected).norm() < 1e-6);
        assert_eq!(curv.repaired, 0);
    }

    #[test]
    fn hessian_repair_replaces_negative_eigenvalues() {
        // logpost with Hessian diag(-2, 1): H = diag(2, -1), repaired to
        // diag(2, 2), Sigma_hat = diag(0.5, 0.5).
        let f = LogPostFn(|theta: &DVector<f64>| {
            -theta[0] * theta[0] + 0.5 * theta[1] * theta[1]
        });
        let curv = hessian_center(&f, &DVector::zeros(2)).unwrap();
        assert_eq!(curv.repaired, 1);
        let sigma = curv.sigma_hat();
        assert!((sigma - DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.5]))).norm() < 1e-6);
    }

    #[test]
    fn hessian_center_errors_without_positive_curvature() {
        let f = LogPostFn(|theta: &DVector<f64>| theta[0] * theta[0]);
        match hessian_center(&f, &DVector::zeros(1)) {
            Err(Error::NoCurvature) => {}
            other => panic!("expected NoCurvature, got {other:?}"),
        }
    }

    #[test]
    fn find_ranges_standard_normal_keeps_full_box() {
        // Relative density at |z| = 4 is e^{-8} = 3.4e-4 > eta = 1e-5.
        let f = LogPostFn(|theta: &DVector<f64>| -0.5 * theta.norm_squared());
        let spec = GridSpec::new(DVector::zeros(2), identity_curvature(2), 5, 25, 1e-5);
        let rr = find_ranges(&f, &spec).unwrap();
        assert_eq!(rr.evals, 121); // (2*5+1)^2 coarse evaluations
        assert_eq!(rr.expansions, 0);
        assert!(rr.widened_axes.is_empty());
        for &(a, b) in &rr.ranges {
            assert_relative_eq!(a, -4.0, epsilon = 1e-12);
            assert_relative_eq!(b, 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn find_ranges_point_mass_is_widened_after_expansions() {
        let f = LogPostFn(|theta: &DVector<f64>| {
            if theta.norm() < 1e-12 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let spec = GridSpec::new(DVector::zeros(1), identity_curvature(1), 5, 25, 1e-5);
        let rr = find_ranges(&f, &spec).unwrap();
        assert_eq!(rr.expansions, 2);
        assert_eq!(rr.widened_axes, vec![0]);
        // One coarse cell of the final (16/5-wide) sweep, centered at 0.
        assert_relative_eq!(rr.ranges[0].0, -1.6, epsilon = 1e-12);
        assert_relative_eq!(rr.ranges[0].1, 1.6, epsilon = 1e-12);
    }

    #[test]
    fn find_ranges_expands_when_mode_sits_on_boundary() {
        // Mode at z = 6: outside [-4, 4], found after one doubling.
        let f = LogPostFn(|theta: &DVector<f64>| -0.5 * (theta[0] - 6.0).powi(2));
        let spec = GridSpec::new(DVector::zeros(1), identity_curvature(1), 5, 25, 1e-5);
        let rr = find_ranges(&f, &spec).unwrap();
        assert_eq!(rr.expansions, 1);
        assert!(rr.ranges[0].0 > -8.0 && rr.ranges[0].1 <= 8.0);
        assert!(rr.ranges[0].1 >= 6.0);
    }

    fn grid_with(spec_m2: usize, f: impl Fn(&DVector<f64>) -> f64 + Sync) -> PosteriorGrid {
        let eval = LogPostFn(f);
        let mut spec = GridSpec::new(DVector::zeros(2), identity_curvature(2), 5, spec_m2, 1e-5);
        spec.ranges = Some(vec![(-4.0, 4.0), (-4.0, 4.0)]);
        build_grid(&eval, &spec).unwrap()
    }

    #[test]
    fn build_grid_counts_and_uniform_masses() {
        let grid = grid_with(25, |_| 0.0);
        assert_eq!(grid.len(), 2601); // (2*25+1)^2
        for p in &grid.points {
            assert_relative_eq!(p.mass, 1.0 / 2601.0, epsilon = 1e-15);
        }
        let sum: f64 = grid.points.iter().map(|p| p.mass).sum();
        assert!((sum - 1.0).abs() < 1e-12);

        // 3-axis count from the benchmark settings: 31^3.
        let eval = LogPostFn(|_t: &DVector<f64>| 0.0);
        let mut spec = GridSpec::new(DVector::zeros(3), identity_curvature(3), 5, 15, 1e-5);
        spec.ranges = Some(vec![(-4.0, 4.0); 3]);
        let g3 = build_grid(&eval, &spec).unwrap();
        assert_eq!(g3.len(), 29_791);
    }

    #[test]
    fn two_point_grid_mass_ratio_is_exact() {
        let eval = LogPostFn(|t: &DVector<f64>| if t[0] < 0.0 { -1.25 } else { -3.75 });
        let mut spec = GridSpec::new(DVector::zeros(1), identity_curvature(1), 1, 0, 1e-5);
        // m2 = 0 would degenerate; emulate a 2-point lattice via ranges and m2 = 1/2.
        spec.m2 = 1;
        spec.ranges = Some(vec![(-1.0, 1.0)]);
        let grid = build_grid(&eval, &spec).unwrap();
        assert_eq!(grid.len(), 3);
        let ratio = grid.points[0].mass / grid.points[2].mass;
        assert_relative_eq!(ratio, (3.75f64 - 1.25).exp(), epsilon = 1e-12);
    }

    #[test]
    fn grid_sample_single_point_and_determinism() {
        let eval = LogPostFn(|t: &DVector<f64>| {
            if t[0].abs() < 1e-12 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let mut spec = GridSpec::new(DVector::zeros(1), identity_curvature(1), 5, 2, 1e-5);
        spec.ranges = Some(vec![(-2.0, 2.0)]);
        let grid = build_grid(&eval, &spec).unwrap();
        let s = grid_sample(&grid, 50, 9, 10.1, 0.01, 1).unwrap();
        for (theta, tau2) in &s.draws {
            assert_eq!(theta[0], 0.0);
            assert!(*tau2 > 0.0);
        }
        let s2 = grid_sample(&grid, 50, 9, 10.1, 0.01, 1).unwrap();
        for (a, b) in s.draws.iter().zip(&s2.draws) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
    }

    #[test]
    fn grid_sample_frequencies_match_binomial_oracle() {
        // Effective two-point grid with masses 0.75 / 0.25 at N = 1e5 (the
        // middle lattice point carries zero mass).
        let eval = LogPostFn(|t: &DVector<f64>| {
            if t[0] <= -0.5 {
                0.75f64.ln()
            } else if t[0] >= 0.5 {
                0.25f64.ln()
            } else {
                f64::NEG_INFINITY
            }
        });
        let mut spec = GridSpec::new(DVector::zeros(1), identity_curvature(1), 1, 1, 1e-5);
        spec.ranges = Some(vec![(-1.0, 1.0)]);
        let grid = build_grid(&eval, &spec).unwrap();
        assert_eq!(grid.len(), 3);
        assert_relative_eq!(grid.points[0].mass, 0.75, epsilon = 1e-12);
        assert_eq!(grid.points[1].mass, 0.0);
        assert_relative_eq!(grid.points[2].mass, 0.25, epsilon = 1e-12);
        let n = 100_000usize;
        let s = grid_sample(&grid, n, 2024, 10.1, 0.01, 1).unwrap();
        let freq0 = s
            .draws
            .iter()
            .filter(|(t, _)| t[0] == grid.points[0].theta[0])
            .count() as f64
            / n as f64;
        let se = (0.75f64 * 0.25 / n as f64).sqrt();
        assert!(
            (freq0 - 0.75).abs() < 3.0 * se,
            "freq {freq0} vs 0.75 (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn griddy_gibbs_separable_matches_axis_marginals() {
        // Product posterior: conditionals are the marginals, so draws are
        // iid after the first scan.
        let weights0 = [0.5f64, 0.3, 0.2];
        let weights1 = [0.1f64, 0.2, 0.7];
        let eval = LogPostFn(move |t: &DVector<f64>| {
            let i = t[0] as usize;
            let j = t[1] as usize;
            weights0[i].ln() + weights1[j].ln()
        });
        let axes = vec![vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0]];
        let n = 10_000usize;
        let s = griddy_gibbs(
            &eval,
            &axes,
            &DVector::zeros(2),
            n,
            1,
            31,
            1.0,
            1.0,
            1,
            false,
        )
        .unwrap();
        assert_eq!(s.draws.len(), n);
        for (axis, weights) in [(0usize, weights0), (1usize, weights1)] {
            for (k, &w) in weights.iter().enumerate() {
                let freq = s
                    .draws
                    .iter()
                    .filter(|(t, _)| t[axis] as usize == k)
                    .count() as f64
                    / n as f64;
                let se = (w * (1.0 - w) / n as f64).sqrt();
                assert!(
                    (freq - w).abs() < 4.0 * se,
                    "axis {axis} value {k}: freq {freq} vs {w}"
                );
            }
        }
    }

    #[test]
    fn griddy_gibbs_degenerate_axes_give_constant_chain() {
        let eval = LogPostFn(|_t: &DVector<f64>| 0.0);
        let axes = vec![vec![2.5], vec![-1.0]];
        let s = griddy_gibbs(
            &eval,
            &axes,
            &DVector::from_vec(vec![2.5, -1.0]),
            20,
            1,
            5,
            1.0,
            1.0,
            1,
            false,
        )
        .unwrap();
        for (t, _) in &s.draws {
            assert_eq!(t.as_slice(), &[2.5, -1.0]);
        }
    }

    #[test]
    fn griddy_gibbs_errors_on_dead_coordinate() {
        let eval = LogPostFn(|_t: &DVector<f64>| f64::NEG_INFINITY);
        let axes = vec![vec![0.0, 1.0]];
        match griddy_gibbs(&eval, &axes, &DVector::zeros(1), 5, 1, 1, 1.0, 1.0, 1, false) {
            Err(Error::StuckCoordinate { coord }) => assert_eq!(coord, 0),
            other => panic!("expected StuckCoordinate, got {other:?}"),
        }
    }

    #[test]
    fn griddy_gibbs_matches_exact_enumeration_in_total_variation() {
        // 7x7-state toy posterior with correlation; compare the empirical
        // law after burn-in against exact enumeration.
        let eval = LogPostFn(|t: &DVector<f64>| {
            -0.5 * (t[0] * t[0] + t[1] * t[1] + 0.8 * t[0] * t[1])
        });
        let axis: Vec<f64> = (0..7).map(|i| -1.5 + 0.5 * i as f64).collect();
        let axes = vec![axis.clone(), axis.clone()];
        // Exact masses.
        let mut exact = std::collections::HashMap::new();
        let mut logs = Vec::new();
        for &a in &axis {
            for &b in &axis {
                logs.push(-0.5 * (a * a + b * b + 0.8 * a * b));
            }
        }
        let masses = math::normalize_log_masses(&logs).unwrap();
        let mut k = 0;
        for &a in &axis {
            for &b in &axis {
                exact.insert((a.to_bits(), b.to_bits()), masses[k]);
                k += 1;
            }
        }
        let n = 100_000usize;
        let s = griddy_gibbs(&eval, &axes, &DVector::zeros(2), n, 1, 4, 1.0, 1.0, 1, false)
            .unwrap();
        let mut counts = std::collections::HashMap::new();
        for (t, _) in &s.draws {
            *counts.entry((t[0].to_bits(), t[1].to_bits())).or_insert(0usize) += 1;
        }
        let mut tv = 0.0;
        for (key, &p) in &exact {
            let emp = *counts.get(key).unwrap_or(&0) as f64 / n as f64;
            tv += (emp - p).abs();
        }
        tv *= 0.5;
        assert!(tv <= 0.05, "total variation {tv}");
    }

    #[test]
    fn refine_m_stops_at_earlier_of_stable_pair() {
        // Mean depends on m as 1/m: stabilizes late.
        let means = |m: usize| -> Result<DVector<f64>> {
            Ok(DVector::from_element(1, 1.0 + 1.0 / m as f64 * 0.001))
        };
        let res = refine_m(means, &[1, 2, 4, 8], 0.001).unwrap();
        assert!(res.stabilized);
        assert_eq!(res.chosen_m, 1); // change 1->2 is 5e-4 < 1e-3
        assert_eq!(res.history.len(), 2);

        // m-independent posterior stops at the first element.
        let res2 = refine_m(|_m| Ok(DVector::from_element(1, 42.0)), &[1, 2, 4], 0.001).unwrap();
        assert!(res2.stabilized);
        assert_eq!(res2.chosen_m, 1);

        // Never stabilizes: returns the last with a warning flag.
        let res3 = refine_m(
            |m| Ok(DVector::from_element(1, m as f64)),
            &[1, 2, 4],
            0.001,
        )
        .unwrap();
        assert!(!res3.stabilized);
        assert_eq!(res3.chosen_m, 4);
    }

    #[test]
    fn reparametrization_round_trip() {
        let curv = PosteriorCurvature {
            vectors: DMatrix::from_row_slice(
                2,
                2,
                &[0.8, -0.6, 0.6, 0.8], // a rotation
            ),
            values: DVector::from_vec(vec![2.0, 0.5]),
            repaired: 0,
        };
        let spec = GridSpec::new(DVector::from_vec(vec![1.0, -3.0]), curv, 5, 25, 1e-5);
        for z in [
            DVector::from_vec(vec![0.3, -1.7]),
            DVector::from_vec(vec![-4.0, 4.0]),
            DVector::zeros(2),
        ] {
            let theta = spec.theta_of_z(&z);
            let back = spec.z_of_theta(&theta);
            assert!((back - &z).norm() < 1e-10);
        }
    }
}
