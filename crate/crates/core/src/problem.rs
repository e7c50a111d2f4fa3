//! Problem descriptions: dimensions, devices and their noise variances.

use crate::unit::RateUnit;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A `P`-dimensional source observed by `K` devices through additive
/// Gaussian noise.
///
/// Dimension `p` of the source has variance `σ²_{X_p}`; device `k` observes
/// dimension `p` through noise of variance `σ²_{N_{k,p}}`. All variances
/// are strictly positive and finite. Indices are 0-based throughout the
/// API (device `k ∈ 0..K`, dimension `p ∈ 0..P`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProblemSpec {
    p: usize,
    k: usize,
    sigma_x_sq: Vec<f64>,
    /// `sigma_n_sq[k][p]`.
    sigma_n_sq: Vec<Vec<f64>>,
}

fn check_variance(label: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::InvalidSpec(format!(
            "{label} must be strictly positive and finite, got {v}"
        )));
    }
    Ok(())
}

impl ProblemSpec {
    /// Build and validate a problem description.
    pub fn new(sigma_x_sq: Vec<f64>, sigma_n_sq: Vec<Vec<f64>>) -> Result<Self> {
        let p = sigma_x_sq.len();
        let k = sigma_n_sq.len();
        if p == 0 {
            return Err(Error::InvalidSpec("need at least one dimension".into()));
        }
        if k == 0 {
            return Err(Error::InvalidSpec("need at least one device".into()));
        }
        for (i, &v) in sigma_x_sq.iter().enumerate() {
            check_variance(&format!("sigma_X_sq[{i}]"), v)?;
        }
        for (ki, row) in sigma_n_sq.iter().enumerate() {
            if row.len() != p {
                return Err(Error::InvalidSpec(format!(
                    "sigma_N_sq[{ki}] has {} entries but P = {p}",
                    row.len()
                )));
            }
            for (pi, &v) in row.iter().enumerate() {
                check_variance(&format!("sigma_N_sq[{ki}][{pi}]"), v)?;
            }
        }
        Ok(ProblemSpec {
            p,
            k,
            sigma_x_sq,
            sigma_n_sq,
        })
    }

    /// Identical-device, identical-dimension instance: every dimension has
    /// source variance `sigma_x_sq` and every device/dimension pair has
    /// noise variance `sigma_n_sq`.
    pub fn identical(p: usize, k: usize, sigma_x_sq: f64, sigma_n_sq: f64) -> Result<Self> {
        Self::new(vec![sigma_x_sq; p], vec![vec![sigma_n_sq; p]; k])
    }

    /// Number of dimensions `P`.
    pub fn dims(&self) -> usize {
        self.p
    }

    /// Number of devices `K`.
    pub fn devices(&self) -> usize {
        self.k
    }

    /// Source variance of dimension `p`.
    pub fn sigma_x_sq(&self, p: usize) -> f64 {
        self.sigma_x_sq[p]
    }

    /// Observation noise variance of device `k` on dimension `p`.
    pub fn sigma_n_sq(&self, k: usize, p: usize) -> f64 {
        self.sigma_n_sq[k][p]
    }

    /// Per-dimension source variances.
    pub fn sigma_x_sq_all(&self) -> &[f64] {
        &self.sigma_x_sq
    }

    /// Noise variances of every device on dimension `p`, in device order.
    pub fn noise_column(&self, p: usize) -> Vec<f64> {
        self.sigma_n_sq.iter().map(|row| row[p]).collect()
    }

    /// Sum of source variances `Σ_p σ²_{X_p}`.
    pub fn total_source_variance(&self) -> f64 {
        self.sigma_x_sq.iter().sum()
    }

    /// True when every device and every dimension share a single
    /// `(σ²_X, σ²_N)` pair, the regime with a closed-form sum rate.
    pub fn is_identical(&self) -> bool {
        let sx = self.sigma_x_sq[0];
        let sn = self.sigma_n_sq[0][0];
        self.sigma_x_sq.iter().all(|&v| v == sx)
            && self
                .sigma_n_sq
                .iter()
                .all(|row| row.iter().all(|&v| v == sn))
    }

    /// Load from a TOML or JSON document (decided by file extension, with a
    /// TOML-then-JSON fallback for unknown extensions). Returns the spec
    /// and the display unit declared in the file (default: bits).
    pub fn from_path(path: &Path) -> Result<(Self, RateUnit)> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path.display().to_string();
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text, &name),
            Some("toml") => Self::from_toml_str(&text, &name),
            _ => Self::from_toml_str(&text, &name).or_else(|_| Self::from_json_str(&text, &name)),
        }
    }

    /// Parse the TOML document form.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<(Self, RateUnit)> {
        let raw: RawSpec = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        raw.build(origin)
    }

    /// Parse the JSON document form.
    pub fn from_json_str(text: &str, origin: &str) -> Result<(Self, RateUnit)> {
        let raw: RawSpec = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        raw.build(origin)
    }
}

/// On-disk form. `P` and `K` are stated explicitly and cross-checked
/// against the array shapes so a truncated file fails loudly.
#[derive(Deserialize)]
struct RawSpec {
    #[serde(rename = "P")]
    p: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "sigma_X_sq")]
    sigma_x_sq: Vec<f64>,
    #[serde(rename = "sigma_N_sq")]
    sigma_n_sq: Vec<Vec<f64>>,
    #[serde(default)]
    unit: Option<String>,
}

impl RawSpec {
    fn build(self, origin: &str) -> Result<(ProblemSpec, RateUnit)> {
        if self.sigma_x_sq.len() != self.p {
            return Err(Error::Parse {
                path: origin.to_string(),
                message: format!(
                    "P = {} but sigma_X_sq has {} entries",
                    self.p,
                    self.sigma_x_sq.len()
                ),
            });
        }
        if self.sigma_n_sq.len() != self.k {
            return Err(Error::Parse {
                path: origin.to_string(),
                message: format!(
                    "K = {} but sigma_N_sq has {} rows",
                    self.k,
                    self.sigma_n_sq.len()
                ),
            });
        }
        let unit = match self.unit.as_deref() {
            None => RateUnit::Bits,
            Some(s) => s.parse().map_err(|message| Error::Parse {
                path: origin.to_string(),
                message,
            })?,
        };
        Ok((ProblemSpec::new(self.sigma_x_sq, self.sigma_n_sq)?, unit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(ProblemSpec::new(vec![], vec![vec![]]).is_err());
        assert!(ProblemSpec::new(vec![1.0], vec![]).is_err());
        assert!(ProblemSpec::new(vec![1.0], vec![vec![1.0, 2.0]]).is_err());
        assert!(ProblemSpec::new(vec![0.0], vec![vec![1.0]]).is_err());
        assert!(ProblemSpec::new(vec![1.0], vec![vec![-1.0]]).is_err());
        assert!(ProblemSpec::new(vec![f64::NAN], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn identical_detection() {
        let s = ProblemSpec::identical(3, 2, 1.0, 4.0).unwrap();
        assert!(s.is_identical());
        let t = ProblemSpec::new(vec![1.0], vec![vec![1.0], vec![4.0]]).unwrap();
        assert!(!t.is_identical());
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            P = 1
            K = 2
            sigma_X_sq = [1.0]
            sigma_N_sq = [[1.0], [4.0]]
            unit = "bits"
        "#;
        let (spec, unit) = ProblemSpec::from_toml_str(text, "inline").unwrap();
        assert_eq!(spec.dims(), 1);
        assert_eq!(spec.devices(), 2);
        assert_eq!(spec.sigma_n_sq(1, 0), 4.0);
        assert_eq!(unit, RateUnit::Bits);
    }

    #[test]
    fn json_shape_mismatch_is_a_parse_error() {
        let text = r#"{"P": 2, "K": 1, "sigma_X_sq": [1.0], "sigma_N_sq": [[1.0, 1.0]]}"#;
        let err = ProblemSpec::from_json_str(text, "inline").unwrap_err();
        assert_eq!(err.code(), "Parse");
    }

    #[test]
    fn json_defaults_to_bits() {
        let text = r#"{"P": 1, "K": 1, "sigma_X_sq": [2.0], "sigma_N_sq": [[1.0]]}"#;
        let (_, unit) = ProblemSpec::from_json_str(text, "inline").unwrap();
        assert_eq!(unit, RateUnit::Bits);
    }
}
