//! Posterior-predictive trajectory bands.
//!
//! For each posterior draw `(theta, tau2)` the initial state is drawn from
//! its Gaussian conditional, the trajectory is integrated past the observed
//! window, and per-time quantiles form the state band. Optionally, iid
//! observation noise `N(0, 1/tau2)` is added per time point to form the
//! predictive band. Draws whose trajectory leaves the finite range are
//! excluded and counted.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::laplace::{curvature_at, laplace_eval_with, OptimOpts, PriorSpec};
use crate::math;
use crate::ode::TimeGrid;
use crate::sampler::SampleSet;
use crate::sensitivity::TrajectorySource;

#[derive(Debug, Clone)]
pub struct Band {
    /// Per time point, per state component.
    pub mean: Vec<DVector<f64>>,
    pub q05: Vec<DVector<f64>>,
    pub q95: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct PredictionBands {
    pub times: Vec<f64>,
    pub state: Band,
    /// Present when observation noise was requested.
    pub predictive: Option<Band>,
    pub excluded: usize,
    pub total: usize,
    /// Set when more than 10% of draws were excluded.
    pub high_exclusion: bool,
}

/// Extend the observed times by `horizon` points with the trailing spacing.
pub fn extended_times(times: &[f64], horizon: usize) -> Result<Vec<f64>> {
    if times.len() < 2 {
        return Err(Error::spec("need at least two observed times to extend"));
    }
    let dt = times[times.len() - 1] - times[times.len() - 2];
    let mut out = times.to_vec();
    let last = times[times.len() - 1];
    for k in 1..=horizon {
        out.push(last + k as f64 * dt);
    }
    Ok(out)
}

/// Compute prediction bands from a sample set.
#[allow(clippy::too_many_arguments)]
pub fn predict_bands<S: TrajectorySource + ?Sized>(
    source: &S,
    data: &Dataset,
    prior: &PriorSpec,
    obs_grid: &TimeGrid,
    samples: &SampleSet,
    horizon: usize,
    include_noise: bool,
    seed: u64,
    opts: &OptimOpts,
) -> Result<PredictionBands> {
    if horizon == 0 {
        return Err(Error::spec("prediction horizon must be at least 1"));
    }
    let all_times = extended_times(obs_grid.times(), horizon)?;
    let full_grid = TimeGrid::new(all_times.clone(), obs_grid.m())?;
    let p = source.p();

    // One Laplace solve per distinct theta; draws revisit grid points.
    struct Cached {
        x1_hat: DVector<f64>,
        chol_l: DMatrix<f64>,
    }
    let mut cache: HashMap<Vec<u64>, Option<Cached>> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let standard = Normal::new(0.0, 1.0).expect("valid normal");

    // Phase 1 (sequential, owns the RNG): draw the initial state per draw.
    let mut starts: Vec<Option<(DVector<f64>, f64)>> = Vec::with_capacity(samples.draws.len());
    for (theta, tau2) in &samples.draws {
        let key: Vec<u64> = theta.iter().map(|v| v.to_bits()).collect();
        let entry = cache.entry(key).or_insert_with(|| {
            let e = laplace_eval_with(source, theta, data, prior, obs_grid, opts, None);
            if !e.converged || !e.log_post.is_finite() {
                return None;
            }
            let curv = curvature_at(source, &e, data, prior, obs_grid).ok()?;
            let chol = nalgebra::Cholesky::new(curv)?;
            Some(Cached {
                x1_hat: e.x1_hat,
                chol_l: chol.l(),
            })
        });
        match entry {
            Some(c) => {
                // x = x1_hat + sqrt(2/tau2) L^{-T} xi draws from
                // N(x1_hat, (2/tau2) M^{-1}) with M = L L^T.
                let xi = DVector::from_fn(p, |_, _| standard.sample(&mut rng));
                let sol = c
                    .chol_l
                    .transpose()
                    .solve_upper_triangular(&xi)
                    .unwrap_or_else(|| DVector::zeros(p));
                let x1 = &c.x1_hat + sol * (2.0 / *tau2).sqrt();
                starts.push(Some((x1, *tau2)));
            }
            None => starts.push(None),
        }
    }

    // Phase 2 (parallel, deterministic): integrate each draw.
    let trajectories: Vec<Option<Vec<DVector<f64>>>> = samples
        .draws
        .par_iter()
        .zip(starts.par_iter())
        .map(|((theta, _), start)| {
            let (x1, _) = start.as_ref()?;
            source.states_only(x1, theta, &full_grid).ok()
        })
        .collect();

    let total = samples.draws.len();
    let excluded = trajectories.iter().filter(|t| t.is_none()).count();
    if excluded == total {
        return Err(Error::spec("every posterior draw failed to integrate"));
    }

    // Phase 3 (sequential RNG): optional observation noise per kept draw.
    let n_times = all_times.len();
    let mut state_cols: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); p]; n_times];
    let mut pred_cols: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); p]; n_times];
    for (traj, start) in trajectories.iter().zip(&starts) {
        let Some(states) = traj else { continue };
        let tau2 = start.as_ref().expect("kept draw has a start").1;
        let sd = (1.0 / tau2).sqrt();
        for (i, s) in states.iter().enumerate() {
            for j in 0..p {
                state_cols[i][j].push(s[j]);
                if include_noise {
                    pred_cols[i][j].push(s[j] + sd * standard.sample(&mut rng));
                }
            }
        }
    }

    let band_of = |cols: &[Vec<Vec<f64>>]| -> Band {
        let mut mean = Vec::with_capacity(n_times);
        let mut q05 = Vec::with_capacity(n_times);
        let mut q95 = Vec::with_capacity(n_times);
        for time_cols in cols {
            let mut m = DVector::zeros(p);
            let mut lo = DVector::zeros(p);
            let mut hi = DVector::zeros(p);
            for j in 0..p {
                let sorted = math::sorted(&time_cols[j]);
                m[j] = math::mean(&time_cols[j]);
                lo[j] = math::quantile_linear(&sorted, 0.05);
                hi[j] = math::quantile_linear(&sorted, 0.95);
            }
            mean.push(m);
            q05.push(lo);
            q95.push(hi);
        }
        Band { mean, q05, q95 }
    };

    let state = band_of(&state_cols);
    let predictive = include_noise.then(|| band_of(&pred_cols));
    Ok(PredictionBands {
        times: all_times,
        state,
        predictive,
        excluded,
        total,
        high_exclusion: excluded * 10 > total,
    })
}
