//! The four subcommands: simulate, infer, predict, summarize.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DVector;

use odelap_core::dataset::{load_csv, save_csv, Dataset};
use odelap_core::laplace::{OptimOpts, PriorSpec, ThetaPrior};

use odelap_core::models::{self, ModelCatalogEntry};
use odelap_core::ode::{Method, TimeGrid};
use odelap_core::pipeline::{
    refine_grid_means, run_grid_laplace, run_griddy_laplace, RunSettings,
};
use odelap_core::predict::predict_bands;
use odelap_core::sampler::{grid_sample, SampleMethod, SampleSet};
use odelap_core::sensitivity::OdeTrajectory;
use odelap_core::stats::{summarize_column, summarize_samples};

use crate::artifacts::{self, RunManifest, Timings, TruthManifest};
use crate::config::RawConfig;
use crate::CliError;

fn core_err(e: odelap_core::Error) -> CliError {
    if e.is_numerical() {
        CliError::Numerical(e.to_string())
    } else {
        CliError::Config(e.to_string())
    }
}

fn require<T>(v: Option<T>, key: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Config(format!("missing required setting '{key}'")))
}

fn model_of(cfg: &RawConfig) -> Result<ModelCatalogEntry, CliError> {
    let name = require(cfg.string("model"), "model")?;
    models::by_name(&name).map_err(core_err)
}

fn out_dir(cfg: &RawConfig) -> Result<PathBuf, CliError> {
    Ok(cfg.path("out").unwrap_or_else(|| PathBuf::from(".")))
}

fn solver_of(cfg: &RawConfig) -> Result<Method, CliError> {
    match cfg.string("solver") {
        None => Ok(Method::Rk4),
        Some(s) => s.parse::<Method>().map_err(core_err),
    }
}

fn seed_of(cfg: &RawConfig) -> Result<u64, CliError> {
    require(cfg.u64("seed")?, "seed")
}

fn prior_of(cfg: &RawConfig, entry: &ModelCatalogEntry, data: &Dataset) -> Result<PriorSpec, CliError> {
    let a = cfg.f64("a")?.unwrap_or(entry.a);
    let b = cfg.f64("b")?.unwrap_or(entry.b);
    let c = cfg.f64("c")?.unwrap_or(entry.c);
    let mu = match cfg.string("mu_x1").as_deref() {
        None | Some("first-observation") => data.first_observation(),
        Some(list) => {
            let vals: Vec<f64> = list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Config(format!("mu_x1: cannot parse '{s}'")))
                })
                .collect::<Result<_, _>>()?;
            if vals.len() != entry.system.p {
                return Err(CliError::Config(format!(
                    "mu_x1 has {} components, model needs {}",
                    vals.len(),
                    entry.system.p
                )));
            }
            DVector::from_vec(vals)
        }
    };
    PriorSpec::new(
        a,
        b,
        c,
        mu,
        ThetaPrior::Box(entry.system.theta_support.clone()),
    )
    .map_err(core_err)
}

fn dvec(cfg: &RawConfig, key: &str, dim: usize) -> Result<Option<DVector<f64>>, CliError> {
    match cfg.f64_list(key)? {
        None => Ok(None),
        Some(v) if v.len() == dim => Ok(Some(DVector::from_vec(v))),
        Some(v) => Err(CliError::Config(format!(
            "{key} has {} components, expected {dim}",
            v.len()
        ))),
    }
}

pub fn simulate(cfg: &RawConfig) -> Result<(), CliError> {
    let entry = model_of(cfg)?;
    let seed = seed_of(cfg)?;
    let out = out_dir(cfg)?;
    let theta = dvec(cfg, "theta", entry.system.q)?.unwrap_or_else(|| entry.theta_true.clone());
    let x1 = dvec(cfg, "x1", entry.system.p)?.unwrap_or_else(|| entry.x1_true.clone());
    let sigma2 = cfg.f64("sigma2")?.unwrap_or(entry.sigma2_true);
    let m_fine = cfg.usize("m_fine")?.unwrap_or(100);
    let positivity = cfg.bool("positivity")?.unwrap_or(entry.positivity);
    let times: Vec<f64> = match (cfg.usize("n")?, cfg.f64("h")?) {
        (Some(n), Some(h)) => {
            let t1 = cfg.f64("t1")?.unwrap_or(0.0);
            (0..n).map(|i| t1 + h * i as f64).collect()
        }
        (None, None) => entry.default_times.clone(),
        _ => return Err(CliError::Config("n and h must be given together".into())),
    };
    let data = models::simulate_data(&entry, &theta, &x1, sigma2, &times, m_fine, seed, positivity)
        .map_err(core_err)?;
    save_csv(&data, out.join("data.csv")).map_err(core_err)?;
    let truth = TruthManifest {
        model: entry.name.to_string(),
        theta: theta.iter().cloned().collect(),
        x1: x1.iter().cloned().collect(),
        sigma2,
        seed,
        m_fine,
        n: data.n(),
        times_first: times[0],
        times_last: *times.last().unwrap(),
        positivity,
    };
    artifacts::write_json(&out.join("truth.json"), &truth)?;
    println!("wrote {} and truth.json ({} rows)", out.join("data.csv").display(), data.n());
    Ok(())
}

pub fn infer(cfg: &RawConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let entry = model_of(cfg)?;
    let seed = seed_of(cfg)?;
    let out = out_dir(cfg)?;
    let data_path = require(cfg.path("data"), "data")?;
    let data = load_csv(&data_path).map_err(core_err)?;
    if data.p() != entry.system.p {
        return Err(CliError::Config(format!(
            "data has {} observation columns, model '{}' needs {}",
            data.p(),
            entry.name,
            entry.system.p
        )));
    }
    let prior = prior_of(cfg, &entry, &data)?;
    let method = solver_of(cfg)?;
    let n_draws = cfg.usize("n_draws")?.unwrap_or(10_000);
    if n_draws == 0 {
        return Err(CliError::Config("at least one draw is required (n_draws >= 1)".into()));
    }
    let sampler_kind = cfg
        .string("sampler")
        .unwrap_or_else(|| if entry.system.q >= 5 { "griddy".into() } else { "grid".into() });
    let theta0 =
        dvec(cfg, "theta0", entry.system.q)?.unwrap_or_else(|| entry.theta_center.clone());

    let mut settings = RunSettings::new(theta0.clone(), seed);
    settings.n_draws = n_draws;
    if let Some(m1) = cfg.usize("m1")? {
        settings.m1 = m1;
    }
    if let Some(m2) = cfg.usize("m2")? {
        settings.m2 = m2;
    }
    if let Some(eta) = cfg.f64("eta")? {
        settings.eta = eta;
    }
    if let Some(tp) = cfg.usize("axis_points")? {
        settings.axis_points = tp;
    }
    if let Some(thin) = cfg.usize("thin")? {
        settings.thin = thin;
    }

    let source = OdeTrajectory::new(&entry.system, method);
    let m_sequence = cfg.usize_list("m_sequence")?;
    let m_fixed = cfg.usize("m")?.unwrap_or(1);

    match sampler_kind.as_str() {
        "grid" => {
            let (samples, grid, spec, ranges, history, stabilized, multi_start_gap, chosen_m);
            if let Some(seq) = m_sequence {
                let rel_tol = cfg.f64("m_rel_tol")?.unwrap_or(0.001);
                let refined = refine_grid_means(
                    &source,
                    &data,
                    &prior,
                    data.times(),
                    &seq,
                    rel_tol,
                    &settings,
                )
                .map_err(core_err)?;
                chosen_m = refined.result.chosen_m;
                let g = refined.chosen_grid().clone();
                let a_star = (data.n() * data.p()) as f64 / 2.0 + prior.a;
                let s = grid_sample(&g, n_draws, seed, a_star, prior.b, chosen_m)
                    .map_err(core_err)?;
                ranges = refined.spec.ranges.clone().unwrap_or_default();
                history = Some(
                    refined
                        .result
                        .history
                        .iter()
                        .map(|(m, v)| (*m, v.iter().cloned().collect::<Vec<f64>>()))
                        .collect::<Vec<_>>(),
                );
                stabilized = Some(refined.result.stabilized);
                if stabilized == Some(false) {
                    eprintln!(
                        "warning: m sequence exhausted without stabilizing; using m = {chosen_m}"
                    );
                }
                multi_start_gap = None;
                spec = refined.spec;
                grid = g;
                samples = s;
            } else {
                chosen_m = m_fixed;
                let tg = TimeGrid::new(data.times().to_vec(), chosen_m).map_err(core_err)?;
                let run = run_grid_laplace(&source, &data, &prior, &tg, &settings)
                    .map_err(core_err)?;
                ranges = run.ranges.ranges.clone();
                history = None;
                stabilized = None;
                multi_start_gap = Some(run.multi_start_gap);
                spec = run.spec;
                grid = run.grid;
                samples = run.samples;
            }
            artifacts::write_file(&out.join("samples.csv"), &artifacts::samples_csv(&samples))?;
            artifacts::write_file(
                &out.join("summary.csv"),
                &artifacts::summary_csv(&summarize_samples(&samples)),
            )?;
            artifacts::write_file(&out.join("grid.csv"), &artifacts::grid_csv(&grid))?;
            let manifest = RunManifest {
                version: env!("CARGO_PKG_VERSION"),
                command: "infer",
                config_hash: cfg.content_hash(),
                model: entry.name.to_string(),
                seed,
                solver: method.name().to_string(),
                sampler: SampleMethod::Grid.name().to_string(),
                m_chosen: chosen_m,
                m_history: history,
                m_stabilized: stabilized,
                n_draws,
                theta0: theta0.iter().cloned().collect(),
                sigma_hat: matrix_rows(&spec.curvature.sigma_hat()),
                ranges_z: Some(ranges),
                grid_points: Some(grid.len()),
                diverged_points: grid.n_failed,
                out_of_support_points: grid.n_out_of_support,
                multi_start_gap,
                timings_s: Timings {
                    total: start.elapsed().as_secs_f64(),
                    sampling: samples.elapsed_s,
                },
            };
            artifacts::write_json(&out.join("manifest.json"), &manifest)?;
            println!(
                "grid inference done: {} points, {} draws, m = {} -> {}",
                grid.len(),
                n_draws,
                chosen_m,
                out.display()
            );
        }
        "griddy" => {
            if m_sequence.is_some() {
                return Err(CliError::Config(
                    "m_sequence refinement drives the full grid posterior; use the grid sampler or a fixed m".into(),
                ));
            }
            let tg = TimeGrid::new(data.times().to_vec(), m_fixed).map_err(core_err)?;
            let run = run_griddy_laplace(
                &source,
                &data,
                &prior,
                &tg,
                &entry.system.theta_support,
                &settings,
            )
            .map_err(core_err)?;
            artifacts::write_file(&out.join("samples.csv"), &artifacts::samples_csv(&run.samples))?;
            artifacts::write_file(
                &out.join("summary.csv"),
                &artifacts::summary_csv(&summarize_samples(&run.samples)),
            )?;
            artifacts::write_file(
                &out.join("axis_marginals.csv"),
                &artifacts::axis_marginals_csv(&run.axes, &run.samples),
            )?;
            let manifest = RunManifest {
                version: env!("CARGO_PKG_VERSION"),
                command: "infer",
                config_hash: cfg.content_hash(),
                model: entry.name.to_string(),
                seed,
                solver: method.name().to_string(),
                sampler: SampleMethod::GriddyGibbs.name().to_string(),
                m_chosen: m_fixed,
                m_history: None,
                m_stabilized: None,
                n_draws,
                theta0: theta0.iter().cloned().collect(),
                sigma_hat: matrix_rows(&run.sigma_hat),
                ranges_z: None,
                grid_points: None,
                diverged_points: 0,
                out_of_support_points: 0,
                multi_start_gap: None,
                timings_s: Timings {
                    total: start.elapsed().as_secs_f64(),
                    sampling: run.samples.elapsed_s,
                },
            };
            artifacts::write_json(&out.join("manifest.json"), &manifest)?;
            println!(
                "griddy inference done: {} draws (thin {}) -> {}",
                n_draws,
                settings.thin,
                out.display()
            );
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown sampler '{other}' (grid|griddy)"
            )));
        }
    }
    Ok(())
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn predict(cfg: &RawConfig) -> Result<(), CliError> {
    let entry = model_of(cfg)?;
    let seed = seed_of(cfg)?;
    let out = out_dir(cfg)?;
    let data = load_csv(require(cfg.path("data"), "data")?).map_err(core_err)?;
    let samples_path = require(cfg.path("samples"), "samples")?;
    let samples = read_samples(&samples_path, entry.system.q, seed)?;
    let method = solver_of(cfg)?;
    let m = cfg.usize("m")?.unwrap_or(1);
    let horizon = cfg.usize("horizon")?.unwrap_or(10);
    if horizon == 0 {
        return Err(CliError::Config("horizon must be at least 1".into()));
    }
    let include_noise = cfg.bool("predictive")?.unwrap_or(false);
    let prior = prior_of(cfg, &entry, &data)?;
    let grid = TimeGrid::new(data.times().to_vec(), m).map_err(core_err)?;
    let source = OdeTrajectory::new(&entry.system, method);
    let bands = predict_bands(
        &source,
        &data,
        &prior,
        &grid,
        &samples,
        horizon,
        include_noise,
        seed,
        &OptimOpts::default(),
    )
    .map_err(core_err)?;
    if bands.high_exclusion {
        eprintln!(
            "warning: {} of {} draws excluded (trajectory blow-up)",
            bands.excluded, bands.total
        );
    }
    artifacts::write_file(
        &out.join("predictions.csv"),
        &artifacts::predictions_csv(&bands, data.columns()),
    )?;
    println!(
        "predictions for {} times ({} draws kept) -> {}",
        bands.times.len(),
        bands.total - bands.excluded,
        out.join("predictions.csv").display()
    );
    Ok(())
}

pub fn summarize(cfg: &RawConfig) -> Result<(), CliError> {
    let samples_path = require(cfg.path("samples"), "samples")?;
    let (names, columns) = read_columns(&samples_path)?;
    let rows: Vec<_> = names
        .iter()
        .zip(&columns)
        .map(|(name, col)| summarize_column(name, col))
        .collect();
    let text = artifacts::summary_csv(&rows);
    match cfg.path("out") {
        Some(dir) => {
            artifacts::write_file(&dir.join("summary.csv"), &text)?;
            println!("wrote {}", dir.join("summary.csv").display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Parse samples.csv back into a sample set (theta columns plus tau2).
fn read_samples(path: &std::path::Path, q: usize, seed: u64) -> Result<SampleSet, CliError> {
    let (names, columns) = read_columns(path)?;
    if names.len() < q + 1 {
        return Err(CliError::Config(format!(
            "{} has {} columns, expected at least {} (theta1..theta{q}, tau2)",
            path.display(),
            names.len(),
            q + 1
        )));
    }
    let tau_idx = names
        .iter()
        .position(|n| n == "tau2")
        .ok_or_else(|| CliError::Config(format!("{} lacks a tau2 column", path.display())))?;
    let n = columns[0].len();
    let mut draws = Vec::with_capacity(n);
    for i in 0..n {
        let theta = DVector::from_fn(q, |j, _| columns[j][i]);
        let tau2 = columns[tau_idx][i];
        if tau2 <= 0.0 {
            return Err(CliError::Config(format!("row {}: tau2 must be positive", i + 2)));
        }
        draws.push((theta, tau2));
    }
    Ok(SampleSet {
        draws,
        seed,
        method: SampleMethod::Grid,
        m: 1,
        elapsed_s: 0.0,
    })
}

fn read_columns(path: &std::path::Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config(format!("{} is empty", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut columns = vec![Vec::new(); names.len()];
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(CliError::Config(format!(
                "{} line {}: expected {} fields, found {}",
                path.display(),
                i + 2,
                names.len(),
                cells.len()
            )));
        }
        for (j, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                CliError::Config(format!("{} line {}: bad number '{cell}'", path.display(), i + 2))
            })?;
            columns[j].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(CliError::Config(format!("{} has no data rows", path.display())));
    }
    Ok((names, columns))
}
