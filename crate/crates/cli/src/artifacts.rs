//! Output files: samples, summaries, grids, predictions and the run
//! manifest. All floats use shortest-round-trip formatting so reruns with
//! the same seed produce byte-identical CSVs.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use odelap_core::predict::PredictionBands;
use odelap_core::sampler::{PosteriorGrid, SampleSet};
use odelap_core::stats::SummaryRow;

use crate::CliError;

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn samples_csv(samples: &SampleSet) -> String {
    let q = samples.draws[0].0.len();
    let mut out = String::new();
    for j in 1..=q {
        let _ = write!(out, "theta{j},");
    }
    out.push_str("tau2,sigma2\n");
    for (theta, tau2) in &samples.draws {
        for v in theta.iter() {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{}", tau2, 1.0 / tau2);
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("param,mean,median,q05,q95\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.name, r.mean, r.median, r.q05, r.q95);
    }
    out
}

pub fn grid_csv(grid: &PosteriorGrid) -> String {
    let q = grid.points[0].theta.len();
    let mut out = String::new();
    for j in 1..=q {
        let _ = write!(out, "theta{j},");
    }
    out.push_str("log_post,mass\n");
    for p in &grid.points {
        for v in p.theta.iter() {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{}", p.log_post, p.mass);
    }
    out
}

/// Per-axis empirical marginal masses of a griddy run (no joint lattice
/// exists, so this is the plot-ready analogue of grid.csv).
pub fn axis_marginals_csv(axes: &[Vec<f64>], samples: &SampleSet) -> String {
    let mut out = String::from("axis,param,theta,mass\n");
    let n = samples.draws.len() as f64;
    for (i, axis) in axes.iter().enumerate() {
        for &value in axis {
            let count = samples
                .draws
                .iter()
                .filter(|(t, _)| t[i].to_bits() == value.to_bits())
                .count();
            let _ = writeln!(out, "{},theta{},{},{}", i, i + 1, value, count as f64 / n);
        }
    }
    out
}

pub fn predictions_csv(bands: &PredictionBands, columns: &[String]) -> String {
    let mut out = String::from("t");
    for c in columns {
        let _ = write!(out, ",{c}_mean,{c}_q05,{c}_q95");
    }
    if bands.predictive.is_some() {
        for c in columns {
            let _ = write!(out, ",{c}_pred_mean,{c}_pred_q05,{c}_pred_q95");
        }
    }
    out.push('\n');
    for (i, t) in bands.times.iter().enumerate() {
        let _ = write!(out, "{t}");
        for j in 0..columns.len() {
            let _ = write!(
                out,
                ",{},{},{}",
                bands.state.mean[i][j], bands.state.q05[i][j], bands.state.q95[i][j]
            );
        }
        if let Some(pred) = &bands.predictive {
            for j in 0..columns.len() {
                let _ = write!(out, ",{},{},{}", pred.mean[i][j], pred.q05[i][j], pred.q95[i][j]);
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub command: &'static str,
    pub config_hash: String,
    pub model: String,
    pub seed: u64,
    pub solver: String,
    pub sampler: String,
    pub m_chosen: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_history: Option<Vec<(usize, Vec<f64>)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_stabilized: Option<bool>,
    pub n_draws: usize,
    pub theta0: Vec<f64>,
    pub sigma_hat: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranges_z: Option<Vec<(f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
    pub diverged_points: usize,
    pub out_of_support_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_start_gap: Option<f64>,
    pub timings_s: Timings,
}

#[derive(Serialize)]
pub struct Timings {
    pub total: f64,
    pub sampling: f64,
}

#[derive(Serialize)]
pub struct TruthManifest {
    pub model: String,
    pub theta: Vec<f64>,
    pub x1: Vec<f64>,
    pub sigma2: f64,
    pub seed: u64,
    pub m_fine: usize,
    pub n: usize,
    pub times_first: f64,
    pub times_last: f64,
    pub positivity: bool,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("manifest serialization: {e}")))?;
    write_file(path, &(text + "\n"))
}
