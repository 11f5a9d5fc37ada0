//! End-to-end inference runs: center curvature, range finding, lattice
//! evaluation and sampling, with the warm-started Laplace evaluator plugged
//! into the sampler. The CLI and the acceptance suite both drive this.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::Dataset;
use crate::error::Result;
use crate::laplace::{laplace_eval_with, OptimOpts, PriorSpec};
use crate::ode::TimeGrid;
use crate::sampler::{
    self, GridSpec, PointEval, PosteriorEval, PosteriorGrid, RangeResult, SampleSet,
};
use crate::sensitivity::TrajectorySource;

/// Run-level knobs shared by the grid and griddy paths.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub theta0: DVector<f64>,
    pub m1: usize,
    pub m2: usize,
    pub eta: f64,
    pub n_draws: usize,
    pub seed: u64,
    /// Griddy: points per axis and thinning.
    pub axis_points: usize,
    pub thin: usize,
    pub optim: OptimOpts,
    /// Evaluate griddy conditionals in parallel.
    pub parallel: bool,
}

impl RunSettings {
    pub fn new(theta0: DVector<f64>, seed: u64) -> Self {
        RunSettings {
            theta0,
            m1: 5,
            m2: 25,
            eta: 1e-5,
            n_draws: 10_000,
            seed,
            axis_points: 31,
            thin: 5,
            optim: OptimOpts::default(),
            parallel: true,
        }
    }
}

/// The Laplace evaluator over a trajectory source, exposed to the sampler.
pub struct LaplacePosterior<'a, S: TrajectorySource + ?Sized> {
    pub source: &'a S,
    pub data: &'a Dataset,
    pub prior: &'a PriorSpec,
    pub grid: &'a TimeGrid,
    pub opts: OptimOpts,
}

impl<'a, S: TrajectorySource + ?Sized> PosteriorEval for LaplacePosterior<'a, S> {
    fn eval(&self, theta: &DVector<f64>, warm: Option<&DVector<f64>>) -> PointEval {
        let e = laplace_eval_with(self.source, theta, self.data, self.prior, self.grid, &self.opts, warm);
        PointEval {
            log_post: e.log_post,
            u_stat: e.u,
            x1_hat: if e.converged { Some(e.x1_hat) } else { None },
            fail: e.fail,
        }
    }
}

/// Artifacts of one grid-sampled inference run.
pub struct GridRun {
    pub spec: GridSpec,
    pub ranges: RangeResult,
    pub grid: PosteriorGrid,
    pub samples: SampleSet,
    /// Largest disagreement between the center optimum and two extra
    /// random-start optimizations (diagnostic, not an error).
    pub multi_start_gap: f64,
    pub elapsed_s: f64,
}

/// Full grid path: curvature at the center, coarse ranges, fine lattice,
/// iid draws.
pub fn run_grid<E: PosteriorEval + ?Sized>(
    eval: &E,
    settings: &RunSettings,
    a_star: f64,
    b_prior: f64,
    m: usize,
) -> Result<GridRun> {
    let start = std::time::Instant::now();
    let curvature = sampler::hessian_center(eval, &settings.theta0)?;
    let mut spec = GridSpec::new(
        settings.theta0.clone(),
        curvature,
        settings.m1,
        settings.m2,
        settings.eta,
    );
    let ranges = sampler::find_ranges(eval, &spec)?;
    spec.ranges = Some(ranges.ranges.clone());
    let grid = sampler::build_grid(eval, &spec)?;
    let samples = sampler::grid_sample(&grid, settings.n_draws, settings.seed, a_star, b_prior, m)?;
    let multi_start_gap = 0.0;
    Ok(GridRun {
        spec,
        ranges,
        grid,
        samples,
        multi_start_gap,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// As `run_grid` for a Laplace posterior, including the multi-start
/// diagnostic at the grid center (two extra starts drawn from
/// `N(mu_x1, c I)`).
pub fn run_grid_laplace<S: TrajectorySource + ?Sized>(
    source: &S,
    data: &Dataset,
    prior: &PriorSpec,
    grid: &TimeGrid,
    settings: &RunSettings,
) -> Result<GridRun> {
    let eval = LaplacePosterior {
        source,
        data,
        prior,
        grid,
        opts: settings.optim.clone(),
    };
    let a_star = (data.n() * data.p()) as f64 / 2.0 + prior.a;
    let mut run = run_grid(&eval, settings, a_star, prior.b, grid.m())?;
    run.multi_start_gap = multi_start_gap(&eval, &run, prior, settings.seed);
    Ok(run)
}

/// Re-optimize the center grid point from two random starts and report the
/// largest relative disagreement of the minimizers.
fn multi_start_gap<E: PosteriorEval + ?Sized>(
    eval: &E,
    run: &GridRun,
    prior: &PriorSpec,
    seed: u64,
) -> f64 {
    let center = run
        .grid
        .points
        .iter()
        .min_by(|a, b| a.z.norm().partial_cmp(&b.z.norm()).unwrap())
        .expect("non-empty grid");
    let base = eval.eval(&center.theta, None);
    let Some(base_x1) = base.x1_hat else {
        return f64::NAN;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d73); // independent stream
    let normal = Normal::new(0.0, prior.c.sqrt()).expect("valid normal");
    let mut gap: f64 = 0.0;
    for _ in 0..2 {
        let start = DVector::from_fn(prior.mu_x1.len(), |i, _| {
            prior.mu_x1[i] + normal.sample(&mut rng)
        });
        let e = eval.eval(&center.theta, Some(&start));
        if let Some(x1) = e.x1_hat {
            let rel = (&x1 - &base_x1).norm() / base_x1.norm().max(1.0);
            gap = gap.max(rel);
        } else {
            gap = gap.max(f64::NAN);
        }
    }
    gap
}

/// Griddy Gibbs path: curvature picks the per-axis widths, scans draw the
/// chain.
pub fn run_griddy_laplace<S: TrajectorySource + ?Sized>(
    source: &S,
    data: &Dataset,
    prior: &PriorSpec,
    grid: &TimeGrid,
    support: &[(f64, f64)],
    settings: &RunSettings,
) -> Result<GriddyRun> {
    let start = std::time::Instant::now();
    let eval = LaplacePosterior {
        source,
        data,
        prior,
        grid,
        opts: settings.optim.clone(),
    };
    let curvature = sampler::hessian_center(&eval, &settings.theta0)?;
    let axes = sampler::griddy_axes(
        &settings.theta0,
        &curvature.sigma_hat(),
        support,
        settings.axis_points,
    )?;
    let a_star = (data.n() * data.p()) as f64 / 2.0 + prior.a;
    let samples = sampler::griddy_gibbs(
        &eval,
        &axes,
        &settings.theta0,
        settings.n_draws,
        settings.thin,
        settings.seed,
        a_star,
        prior.b,
        grid.m(),
        settings.parallel,
    )?;
    Ok(GriddyRun {
        axes,
        sigma_hat: curvature.sigma_hat(),
        samples,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Artifacts of one griddy-Gibbs inference run.
pub struct GriddyRun {
    pub axes: Vec<Vec<f64>>,
    pub sigma_hat: DMatrix<f64>,
    pub samples: SampleSet,
    pub elapsed_s: f64,
}

/// Posterior mean at a given `m` via the grid path (no sampling noise);
/// feeds `sampler::refine_m`.
pub fn grid_posterior_mean<S: TrajectorySource + ?Sized>(
    source: &S,
    data: &Dataset,
    prior: &PriorSpec,
    times: &[f64],
    m: usize,
    settings: &RunSettings,
) -> Result<DVector<f64>> {
    let grid = TimeGrid::new(times.to_vec(), m)?;
    let eval = LaplacePosterior {
        source,
        data,
        prior,
        grid: &grid,
        opts: settings.optim.clone(),
    };
    let curvature = sampler::hessian_center(&eval, &settings.theta0)?;
    let mut spec = GridSpec::new(
        settings.theta0.clone(),
        curvature,
        settings.m1,
        settings.m2,
        settings.eta,
    );
    let ranges = sampler::find_ranges(&eval, &spec)?;
    spec.ranges = Some(ranges.ranges);
    let grid_post = sampler::build_grid(&eval, &spec)?;
    Ok(grid_post.mean())
}

/// Refinement output: the stopping decision, the fixed lattice spec, and
/// every per-level discrete posterior (so the chosen level need not be
/// re-evaluated).
pub struct RefinedGrids {
    pub result: sampler::RefineResult,
    pub spec: GridSpec,
    pub grids: Vec<(usize, PosteriorGrid)>,
}

impl RefinedGrids {
    pub fn chosen_grid(&self) -> &PosteriorGrid {
        let m = self.result.chosen_m;
        &self
            .grids
            .iter()
            .find(|(gm, _)| *gm == m)
            .expect("chosen level was evaluated")
            .1
    }
}

/// Sub-step refinement with the lattice held fixed: the spec (center,
/// curvature, ranges) is built once at the first level, then each `m` is
/// evaluated on the identical lattice so the stopping rule sees only the
/// effect of `m`, not grid-placement noise.
pub fn refine_grid_means<S: TrajectorySource + ?Sized>(
    source: &S,
    data: &Dataset,
    prior: &PriorSpec,
    times: &[f64],
    m_sequence: &[usize],
    rel_tol: f64,
    settings: &RunSettings,
) -> Result<RefinedGrids> {
    let first = *m_sequence
        .first()
        .ok_or_else(|| crate::error::Error::spec("m sequence must be non-empty"))?;
    let grid0 = TimeGrid::new(times.to_vec(), first)?;
    let eval0 = LaplacePosterior {
        source,
        data,
        prior,
        grid: &grid0,
        opts: settings.optim.clone(),
    };
    let curvature = sampler::hessian_center(&eval0, &settings.theta0)?;
    let mut spec = GridSpec::new(
        settings.theta0.clone(),
        curvature,
        settings.m1,
        settings.m2,
        settings.eta,
    );
    let ranges = sampler::find_ranges(&eval0, &spec)?;
    spec.ranges = Some(ranges.ranges);
    let mut grids: Vec<(usize, PosteriorGrid)> = Vec::new();
    let result = sampler::refine_m(
        |m| {
            let grid = TimeGrid::new(times.to_vec(), m)?;
            let eval = LaplacePosterior {
                source,
                data,
                prior,
                grid: &grid,
                opts: settings.optim.clone(),
            };
            let built = sampler::build_grid(&eval, &spec)?;
            let mean = built.mean();
            grids.push((m, built));
            Ok(mean)
        },
        m_sequence,
        rel_tol,
    )?;
    Ok(RefinedGrids {
        result,
        spec,
        grids,
    })
}
