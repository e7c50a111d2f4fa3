//! The achievable rate region under the unbiased-estimator constraint.
//!
//! For one source dimension `p` with source variance `σ²_X` and device
//! noise variances `σ²_{N_k}`, an achievable operating point at distortion
//! `D` is parametrized by nonnegative *noise-quantization rates*
//! `r_1, …, r_K` that balance the distortion-precision budget
//!
//! ```text
//!     Σ_k (1 − e^{−2 r_k}) / σ²_{N_k}  =  1 / D          (balance)
//! ```
//!
//! (rates in nats; in bits the same identity holds with `2^{−2 r}`). The
//! per-device description rates `R_k` then have to satisfy, for every
//! subset `A` of devices,
//!
//! ```text
//!     Σ_{k∈A} R_k ≥ Σ_{k∈A} r_k + ½ log(1/σ²_X + 1/D)
//!                   − ½ log(1/σ²_X + Σ_{k∉A} (1 − e^{−2 r_k})/σ²_{N_k})
//! ```
//!
//! Because `(1 − e^{−2r})/σ²` can never exceed `1/σ²`, the distortion on a
//! dimension is floored at `(Σ_k 1/σ²_{N_k})⁻¹` regardless of rate — the
//! structural difference from the classic (biased) setting, where enough
//! rate drives distortion to the prior floor `(1/σ²_X + Σ 1/σ²_{N_k})⁻¹`
//! and to zero sum rate for `D ≥ σ²_X`.
//!
//! This module provides the floor and balance primitives, the minimum
//! sum-rate allocation (water-filling, [`waterfill_noise_rates`]), subset
//! bounds and membership checks, the closed-form sum rate for identical
//! devices, a numeric sum-rate solver over heterogeneous dimensions, its
//! inverse, and the classic-region comparison value.

mod membership;
mod sum_rate;
mod waterfill;

pub use membership::{
    check_membership, subset_rate_bound, MembershipOptions, MembershipReport, SearchFailure,
    Verdict, Violation,
};
pub use sum_rate::{
    classic_comparison_sum_rate, classic_floor, distortion_for_sum_rate, sum_rate_closed_form,
    sum_rate_closed_form_result, sum_rate_numeric, tradeoff_curve, NumericOptions, SolveMethod,
    SolverStats,
};
pub use waterfill::{waterfill_noise_rates, Waterfill};

use crate::problem::ProblemSpec;
use crate::unit::RateUnit;
use crate::{Error, Result};
use serde::Serialize;

/// Absolute tolerance on `1/D` for the distortion-precision balance.
pub const BALANCE_TOL: f64 = 1e-9;

/// Greatest lower bound on the per-dimension distortion: the inverse total
/// observation precision `(Σ_k 1/σ²_{N_{k,p}})⁻¹`. No finite rates reach
/// below it under the unbiased constraint.
pub fn distortion_floor(spec: &ProblemSpec, p: usize) -> f64 {
    let precision: f64 = (0..spec.devices()).map(|k| 1.0 / spec.sigma_n_sq(k, p)).sum();
    1.0 / precision
}

/// Sum of per-dimension floors — the infeasibility threshold for a total
/// distortion budget.
pub fn total_distortion_floor(spec: &ProblemSpec) -> f64 {
    (0..spec.dims()).map(|p| distortion_floor(spec, p)).sum()
}

/// Distortion induced on dimension `p` by noise-quantization rates
/// `rates_p` (one per device, in `unit`):
/// `D = [Σ_k (1 − e^{−2 r_k})/σ²_{N_{k,p}}]⁻¹`.
///
/// Strictly decreasing in every rate and approaching
/// [`distortion_floor`] as all rates grow. Errors with
/// [`Error::AllRatesZero`] when every rate is zero (infinite distortion)
/// and [`Error::NegativeRate`] on negative input.
pub fn induced_distortion(
    spec: &ProblemSpec,
    p: usize,
    rates_p: &[f64],
    unit: RateUnit,
) -> Result<f64> {
    let precision = rate_precision_sum(spec, p, rates_p, unit)?;
    if precision == 0.0 {
        return Err(Error::AllRatesZero { dimension: p });
    }
    Ok(1.0 / precision)
}

/// `Σ_k (1 − e^{−2 r_k})/σ²_{N_{k,p}}`, the precision the rates buy on
/// dimension `p`. Shared by the balance checks so every caller sums in the
/// same (ascending device) order and gets bit-identical values.
pub(crate) fn rate_precision_sum(
    spec: &ProblemSpec,
    p: usize,
    rates_p: &[f64],
    unit: RateUnit,
) -> Result<f64> {
    if rates_p.len() != spec.devices() {
        return Err(Error::InvalidInput(format!(
            "expected {} rates on dimension {p}, got {}",
            spec.devices(),
            rates_p.len()
        )));
    }
    let mut sum = 0.0;
    for (k, &r) in rates_p.iter().enumerate() {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::NegativeRate {
                device: k,
                dimension: p,
                rate: r,
            });
        }
        sum += (1.0 - unit.exp_neg2(r)) / spec.sigma_n_sq(k, p);
    }
    Ok(sum)
}

/// A per-dimension distortion split `D_1, …, D_P` against a total budget.
#[derive(Clone, Debug, Serialize)]
pub struct DistortionAllocation {
    d_p: Vec<f64>,
    d_total: f64,
}

impl DistortionAllocation {
    /// Validate a split: every `D_p` strictly above its floor, and
    /// `Σ_p D_p ≤ D_total` (up to 1e-12 relative slack).
    pub fn new(spec: &ProblemSpec, d_p: Vec<f64>, d_total: f64) -> Result<Self> {
        if d_p.len() != spec.dims() {
            return Err(Error::InvalidInput(format!(
                "expected {} per-dimension distortions, got {}",
                spec.dims(),
                d_p.len()
            )));
        }
        for (p, &d) in d_p.iter().enumerate() {
            if !d.is_finite() || d <= 0.0 {
                return Err(Error::DistortionNonpositive { d });
            }
            let floor = distortion_floor(spec, p);
            if d <= floor {
                return Err(Error::DistortionBelowFloor {
                    dimension: p,
                    d,
                    floor,
                });
            }
        }
        let sum: f64 = d_p.iter().sum();
        if sum > d_total * (1.0 + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "per-dimension distortions sum to {sum}, above the total budget {d_total}"
            )));
        }
        Ok(DistortionAllocation { d_p, d_total })
    }

    /// Equal split of `d_total` across dimensions.
    pub fn equal_split(spec: &ProblemSpec, d_total: f64) -> Result<Self> {
        let d = d_total / spec.dims() as f64;
        Self::new(spec, vec![d; spec.dims()], d_total)
    }

    /// Per-dimension distortions.
    pub fn per_dim(&self) -> &[f64] {
        &self.d_p
    }

    /// Distortion of dimension `p`.
    pub fn d(&self, p: usize) -> f64 {
        self.d_p[p]
    }

    /// The total budget this split was made against.
    pub fn d_total(&self) -> f64 {
        self.d_total
    }
}

/// Noise-quantization rates for every `(device, dimension)` pair, tagged
/// with their unit, plus the distortion each dimension's rates induce.
#[derive(Clone, Debug, Serialize)]
pub struct RateAllocation {
    /// `rates[k][p]`, same layout as the spec's noise grid.
    rates: Vec<Vec<f64>>,
    unit: RateUnit,
    induced_d: Vec<f64>,
}

impl RateAllocation {
    /// Validate a `K × P` rate grid against a spec: elementwise
    /// nonnegative, at least one positive rate per dimension.
    pub fn new(spec: &ProblemSpec, rates: Vec<Vec<f64>>, unit: RateUnit) -> Result<Self> {
        if rates.len() != spec.devices() || rates.iter().any(|row| row.len() != spec.dims()) {
            return Err(Error::InvalidInput(format!(
                "rate grid must be {} x {}",
                spec.devices(),
                spec.dims()
            )));
        }
        let mut induced_d = Vec::with_capacity(spec.dims());
        for p in 0..spec.dims() {
            let column: Vec<f64> = rates.iter().map(|row| row[p]).collect();
            induced_d.push(induced_distortion(spec, p, &column, unit)?);
        }
        Ok(RateAllocation {
            rates,
            unit,
            induced_d,
        })
    }

    /// Assemble from per-dimension columns (the water-filler's output
    /// order). `columns[p][k]`.
    pub fn from_columns(
        spec: &ProblemSpec,
        columns: Vec<Vec<f64>>,
        unit: RateUnit,
    ) -> Result<Self> {
        if columns.len() != spec.dims() {
            return Err(Error::InvalidInput(format!(
                "expected {} rate columns, got {}",
                spec.dims(),
                columns.len()
            )));
        }
        let rates: Vec<Vec<f64>> = (0..spec.devices())
            .map(|k| (0..spec.dims()).map(|p| columns[p][k]).collect())
            .collect();
        Self::new(spec, rates, unit)
    }

    /// Rate of device `k` on dimension `p`.
    pub fn rate(&self, k: usize, p: usize) -> f64 {
        self.rates[k][p]
    }

    /// All rates of dimension `p` in device order.
    pub fn column(&self, p: usize) -> Vec<f64> {
        self.rates.iter().map(|row| row[p]).collect()
    }

    /// The full `K × P` grid.
    pub fn grid(&self) -> &[Vec<f64>] {
        &self.rates
    }

    /// Unit the rates are expressed in.
    pub fn unit(&self) -> RateUnit {
        self.unit
    }

    /// Distortion induced on dimension `p` by this allocation.
    pub fn induced_d(&self, p: usize) -> f64 {
        self.induced_d[p]
    }

    /// Express the same allocation in another unit.
    pub fn convert(&self, spec: &ProblemSpec, to: RateUnit) -> Result<Self> {
        let rates = self
            .rates
            .iter()
            .map(|row| row.iter().map(|&r| self.unit.convert(r, to)).collect())
            .collect();
        Self::new(spec, rates, to)
    }
}

/// A candidate operating point: per-device description rates `R_k`,
/// optionally with the per-dimension decomposition `R_{k,p}` that
/// certifies them.
#[derive(Clone, Debug, Serialize)]
pub struct RatePoint {
    r_k: Vec<f64>,
    unit: RateUnit,
    r_kp: Option<Vec<Vec<f64>>>,
}

impl RatePoint {
    /// Totals-only point (membership will search for a decomposition).
    pub fn totals_only(r_k: Vec<f64>, unit: RateUnit) -> Result<Self> {
        for (k, &r) in r_k.iter().enumerate() {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::NegativeRate {
                    device: k,
                    dimension: 0,
                    rate: r,
                });
            }
        }
        Ok(RatePoint {
            r_k,
            unit,
            r_kp: None,
        })
    }

    /// Point with an explicit decomposition. Each device's total must
    /// equal the sum of its per-dimension rates (`R_k = Σ_p R_{k,p}`,
    /// within 1e-9) — the form in which optimal points are certified.
    pub fn with_decomposition(
        r_k: Vec<f64>,
        r_kp: Vec<Vec<f64>>,
        unit: RateUnit,
    ) -> Result<Self> {
        if r_kp.len() != r_k.len() {
            return Err(Error::InvalidInput(format!(
                "decomposition has {} rows for {} devices",
                r_kp.len(),
                r_k.len()
            )));
        }
        for (k, row) in r_kp.iter().enumerate() {
            for (p, &r) in row.iter().enumerate() {
                if !r.is_finite() || r < 0.0 {
                    return Err(Error::NegativeRate {
                        device: k,
                        dimension: p,
                        rate: r,
                    });
                }
            }
            let total: f64 = row.iter().sum();
            if (total - r_k[k]).abs() > 1e-9 * r_k[k].abs().max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "device {k}: R_k = {} but the decomposition sums to {total}",
                    r_k[k]
                )));
            }
        }
        Ok(RatePoint {
            r_k,
            unit,
            r_kp: Some(r_kp),
        })
    }

    /// Per-device totals.
    pub fn totals(&self) -> &[f64] {
        &self.r_k
    }

    /// Unit of every rate in the point.
    pub fn unit(&self) -> RateUnit {
        self.unit
    }

    /// The decomposition, if one was supplied.
    pub fn decomposition(&self) -> Option<&Vec<Vec<f64>>> {
        self.r_kp.as_ref()
    }
}

/// Result of a sum-rate computation: the value, its certificate (the
/// distortion split and the rates achieving it) and solver diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct SumRateResult {
    /// Minimum sum rate at the requested budget, in `unit`.
    pub sum_rate: f64,
    /// Unit for `sum_rate`, `per_dim_rate` and the rate grid.
    pub unit: RateUnit,
    /// `per_dim_rate[p] = Σ_k r_{k,p} + ½ log(1 + σ²_{X_p}/D_p)`; sums to
    /// `sum_rate` exactly.
    pub per_dim_rate: Vec<f64>,
    /// The distortion split behind the value.
    pub allocation: DistortionAllocation,
    /// The noise-quantization rates behind the value.
    pub rates: RateAllocation,
    /// Which solver produced the value.
    pub method: SolveMethod,
    /// Iteration counts and residuals.
    pub stats: SolverStats,
}
