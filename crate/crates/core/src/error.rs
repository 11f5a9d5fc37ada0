//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by integration, optimization, sampling and data handling.
#[derive(Error, Debug, Clone)]
pub enum Error {
    /// A model function (rhs, Jacobian or Hessian) returned a non-finite
    /// value. Carries the time and state at which evaluation failed and,
    /// when raised inside `integrate`, the observation interval index.
    #[error("non-finite model evaluation at t = {t}{}{}",
        interval.map(|i| format!(" (interval {i})")).unwrap_or_default(),
        format_state(state))]
    Eval {
        t: f64,
        state: Vec<f64>,
        interval: Option<usize>,
    },

    /// Dimension mismatches and other contract violations.
    #[error("{0}")]
    Spec(String),

    /// A matrix required to be symmetric positive definite was not,
    /// even after jitter regularization.
    #[error("matrix not positive definite: {0}")]
    NonPd(String),

    /// Range finding could not bound the posterior mass.
    #[error("posterior not localized: coarse-grid mode still on the boundary after {expansions} box expansions")]
    NotLocalized { expansions: usize },

    /// The finite-difference Hessian at the grid center had no positive
    /// eigenvalue.
    #[error("no curvature at center: all eigenvalues non-positive; pick a better center point")]
    NoCurvature,

    /// Every grid point carries zero posterior mass.
    #[error("all grid masses are zero; nothing to sample")]
    ZeroMass,

    /// A griddy Gibbs full conditional had no support on its axis grid.
    #[error("griddy Gibbs stuck: full conditional for coordinate {coord} is zero everywhere")]
    StuckCoordinate { coord: usize },

    /// CSV parse failure with the 1-based line number.
    #[error("csv error at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    /// I/O failure (path kept for context).
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

fn format_state(state: &[f64]) -> String {
    if state.is_empty() {
        String::new()
    } else {
        format!(
            ", state = [{}]",
            state
                .iter()
                .map(|v| format!("{v:.6e}"))
                .collect::<Vec<_>>()
                .join(", ")
        )
    }
}

impl Error {
    pub fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    /// True for failures of the numerical machinery (as opposed to bad
    /// configuration or malformed input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Eval { .. }
                | Error::NonPd(_)
                | Error::NotLocalized { .. }
                | Error::NoCurvature
                | Error::ZeroMass
                | Error::StuckCoordinate { .. }
        )
    }
}
