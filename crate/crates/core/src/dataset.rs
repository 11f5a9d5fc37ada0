//! Observed data: strictly increasing times with one p-vector per time,
//! plus the CSV schema used by every file interface.
//!
//! The on-disk format is a UTF-8 CSV with header `t,y1,...,yp` and plain
//! decimal floats. Floats are written with Rust's shortest-round-trip
//! formatting, so write-then-read reproduces the in-memory values exactly.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    times: Vec<f64>,
    obs: Vec<DVector<f64>>,
    columns: Vec<String>,
}

impl Dataset {
    pub fn new(times: Vec<f64>, obs: Vec<DVector<f64>>, columns: Vec<String>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::spec("no observations"));
        }
        if times.len() != obs.len() {
            return Err(Error::spec("times and observations must have equal length"));
        }
        let p = obs[0].len();
        if p == 0 || columns.len() != p {
            return Err(Error::spec("column names must match observation dimension"));
        }
        for (i, row) in obs.iter().enumerate() {
            if row.len() != p {
                return Err(Error::spec(format!("row {i} has dimension {}, expected {p}", row.len())));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::spec(format!("row {i} contains a non-finite value")));
            }
        }
        for i in 1..times.len() {
            if !(times[i] > times[i - 1]) {
                return Err(Error::spec(format!(
                    "times must be strictly increasing (violated at row {i})"
                )));
            }
        }
        Ok(Dataset { times, obs, columns })
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn p(&self) -> usize {
        self.obs[0].len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn row(&self, i: usize) -> &DVector<f64> {
        &self.obs[i]
    }

    pub fn rows(&self) -> &[DVector<f64>] {
        &self.obs
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn first_observation(&self) -> DVector<f64> {
        self.obs[0].clone()
    }
}

/// Parse a dataset from the `t,y1,...,yp` CSV schema. Errors carry 1-based
/// line numbers; rows must be sorted by strictly increasing `t`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Csv { line: 1, msg: "empty file".into() })?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.len() < 2 || fields[0] != "t" {
        return Err(Error::Csv {
            line: 1,
            msg: format!("header must be 't,y1,...,yp', got '{header}'"),
        });
    }
    let columns: Vec<String> = fields[1..].iter().map(|s| s.to_string()).collect();
    let p = columns.len();

    let mut times = Vec::new();
    let mut obs = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != p + 1 {
            return Err(Error::Csv {
                line: lineno,
                msg: format!("expected {} fields, found {}", p + 1, cells.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Csv {
                line: lineno,
                msg: format!("cannot parse '{s}' as a number"),
            })
        };
        let t = parse(cells[0])?;
        if let Some(&prev) = times.last() {
            if t == prev {
                return Err(Error::Csv {
                    line: lineno,
                    msg: format!("duplicate time {t}"),
                });
            }
            if t < prev {
                return Err(Error::Csv {
                    line: lineno,
                    msg: format!("times not strictly increasing ({t} after {prev})"),
                });
            }
        }
        let mut row = DVector::zeros(p);
        for j in 0..p {
            let v = parse(cells[j + 1])?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    line: lineno,
                    msg: "non-finite observation".into(),
                });
            }
            row[j] = v;
        }
        times.push(t);
        obs.push(row);
    }
    if times.is_empty() {
        return Err(Error::Csv { line: 1, msg: "no observations".into() });
    }
    Dataset::new(times, obs, columns)
}

/// Serialize to the `t,y1,...,yp` schema with shortest-round-trip floats.
pub fn to_csv(data: &Dataset) -> String {
    let mut out = String::new();
    out.push('t');
    for c in data.columns() {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for i in 0..data.n() {
        let _ = write!(out, "{}", data.times()[i]);
        for j in 0..data.p() {
            let _ = write!(out, ",{}", data.row(i)[j]);
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(data)).map_err(|e| Error::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}
