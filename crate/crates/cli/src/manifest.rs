//! The manifest: a fully-resolved description of one CLI run.
//!
//! Every run writes one next to its outputs, with every default expanded,
//! every unit pinned and every input path recorded. `fedrate rerun
//! --manifest <file>` replays the run; because all randomness is
//! counter-based and keyed by the recorded seed, the replay produces
//! byte-identical outputs as long as the input files are unchanged.

use crate::fsio::{self, GridSpec};
use fedrate_core::fl_planner::DConvention;
use fedrate_core::fl_sim::ProblemKind;
use fedrate_core::{Error, RateUnit, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Bumped when the manifest layout changes incompatibly.
pub const FORMAT_VERSION: u32 = 1;

/// Which sum-rate solver a command uses.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Closed form when every device and dimension shares one variance
    /// pair, the general solver otherwise.
    Auto,
    /// Force the identical-instance closed form (errors on other specs).
    ClosedForm,
    /// Force the general numeric solver.
    Numeric,
}

impl Method {
    pub fn parse(text: &str) -> Result<Self> {
        match text.to_ascii_lowercase().as_str() {
            "auto" => Ok(Method::Auto),
            "closed-form" | "closed_form" => Ok(Method::ClosedForm),
            "numeric" => Ok(Method::Numeric),
            other => Err(Error::InvalidInput(format!(
                "unknown method {other:?}; use auto, closed-form or numeric"
            ))),
        }
    }
}

/// One subcommand with every argument resolved.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum CommandSpec {
    Sumrate {
        spec: PathBuf,
        d_total: f64,
        method: Method,
    },
    RegionCheck {
        spec: PathBuf,
        certificate: PathBuf,
        strict: bool,
    },
    Plan {
        epsilon: f64,
        a: f64,
        l: f64,
        devices: usize,
        dims: usize,
        sigma_x_sq: Option<f64>,
        sigma_n_sq: Option<f64>,
        schedule: Option<PathBuf>,
        d_convention: DConvention,
        d_grid: GridSpec,
        curve_out: Option<PathBuf>,
    },
    SimulateCeo {
        spec: PathBuf,
        d_total: f64,
        n: usize,
        dithered: bool,
        dither_scale: f64,
        dynamic_range: f64,
        csv_out: Option<PathBuf>,
    },
    SimulateFl {
        problem: ProblemKind,
        dims: usize,
        cond: f64,
        devices: usize,
        batch: usize,
        sigma_sq: f64,
        estimator: String,
        t: u64,
        seeds: usize,
        step_size: Option<f64>,
    },
    Tradeoff {
        spec: PathBuf,
        d_grid: GridSpec,
    },
}

/// A complete run description; serializing this is the manifest file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub format_version: u32,
    /// Root seed for every randomized stage of the run.
    pub seed: u64,
    /// Rate unit for results (commands whose outputs pin their own unit,
    /// like the bits-denominated CSV sweeps, say so in their headers).
    pub unit: RateUnit,
    /// Primary output file, if any (JSON results are also printed).
    pub out: Option<PathBuf>,
    /// Where this manifest itself is written.
    pub manifest: PathBuf,
    pub command: CommandSpec,
}

impl Manifest {
    /// Serialized form written to disk (pretty JSON, trailing newline).
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialization cannot fail");
        text.push('\n');
        text
    }

    /// Load and validate a manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsio::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if manifest.tool != "fedrate" {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!("manifest is for tool {:?}, not \"fedrate\"", manifest.tool),
            });
        }
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!(
                    "manifest format version {} is not the supported {FORMAT_VERSION}",
                    manifest.format_version
                ),
            });
        }
        Ok(manifest)
    }
}
