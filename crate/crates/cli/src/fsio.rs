//! File plumbing shared by every subcommand: crash-safe writes, distortion
//! grids, and the variance-schedule CSV format.

use fedrate_core::fl_planner::VarianceSchedule;
use fedrate_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Wrap an [`std::io::Error`] with the path it happened on.
pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `bytes` to `path` through a temporary file in the same directory,
/// then rename. A crash mid-write never leaves a half-written artifact at
/// the final path.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Read a whole file, wrapping the error with its path.
pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Evenly spaced distortion grid, inclusive of both endpoints, written on
/// the command line as `lo:hi:n`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridSpec {
    /// Parse `lo:hi:n` (e.g. `0.6:2.0:50`).
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = |why: &str| Error::InvalidInput(format!("grid {text:?}: {why} (expected lo:hi:n, e.g. 0.6:2.0:50)"));
        if parts.len() != 3 {
            return Err(bad("needs exactly three colon-separated fields"));
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad("lo is not a number"))?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad("hi is not a number"))?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad("n is not a count"))?;
        if !lo.is_finite() || !hi.is_finite() || lo <= 0.0 {
            return Err(bad("endpoints must be finite and lo must be positive"));
        }
        if hi < lo {
            return Err(bad("hi must not be below lo"));
        }
        if n == 0 {
            return Err(bad("n must be at least 1"));
        }
        if n == 1 && hi != lo {
            return Err(bad("a single-point grid needs lo == hi"));
        }
        Ok(GridSpec { lo, hi, n })
    }

    /// Materialize the grid points.
    pub fn points(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.lo];
        }
        let step = (self.hi - self.lo) / (self.n - 1) as f64;
        (0..self.n).map(|i| self.lo + step * i as f64).collect()
    }
}

/// Load a stepwise variance schedule from a CSV with the header
/// `t,sigma_X_sq,sigma_N_sq`. Each row opens a segment at iteration `t`
/// (1-based); the first row must start at `t = 1` and starts must be
/// strictly increasing.
pub fn load_schedule(path: &Path) -> Result<VarianceSchedule> {
    let parse_err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let text = read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(e.to_string()))?
        .clone();
    let expected = ["t", "sigma_X_sq", "sigma_N_sq"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(parse_err(format!(
            "schedule header must be {}, got {}",
            expected.join(","),
            got.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        if record.len() != 3 {
            return Err(parse_err(format!("row {} has {} fields, expected 3", i + 2, record.len())));
        }
        let field = |j: usize| record.get(j).unwrap_or("");
        let t: u64 = field(0)
            .parse()
            .map_err(|_| parse_err(format!("row {}: t {:?} is not an iteration index", i + 2, field(0))))?;
        let sx: f64 = field(1)
            .parse()
            .map_err(|_| parse_err(format!("row {}: sigma_X_sq {:?} is not a number", i + 2, field(1))))?;
        let sn: f64 = field(2)
            .parse()
            .map_err(|_| parse_err(format!("row {}: sigma_N_sq {:?} is not a number", i + 2, field(2))))?;
        rows.push((t, sx, sn));
    }
    VarianceSchedule::from_table(rows)
}
