//! Communication planning for distortion-limited gradient descent.
//!
//! For a convex `L`-smooth objective optimized over a ball of radius `A`
//! with gradient estimates whose variance is bounded by `D`, running `T`
//! steps at learning rate `η = γ/(L+1)`, `γ = A√(2/(DT))`, drives the
//! averaged iterate's expected suboptimality below
//!
//! ```text
//!     A·√(2D/T) + L·A²/T.
//! ```
//!
//! Inverting that bound for a target `ε` gives the iteration requirement
//!
//! ```text
//!     T ≥ A²·( √(D/(2ε²) + L/ε) + √(D/(2ε²)) )²,
//! ```
//!
//! and the rate region prices each iteration: with `K` identical devices
//! at gradient-noise variance `σ²_N(t)` and gradient second moment
//! `σ²_X(t)` per dimension, delivering estimator variance `D` costs
//!
//! ```text
//!     P·[ −(K/2)·log(1 − σ²_N(t)/(K·D̃)) + ½·log(1 + σ²_X(t)/D̃) ]  bits,
//! ```
//!
//! where `D̃` is `D` itself under the [`DConvention::PerDimension`]
//! reading (the formula's `D` is a per-dimension distortion, matching the
//! closed-form sum rate) or `D/P` under [`DConvention::Total`] (the
//! variance budget is split evenly over dimensions — the reading that
//! composes consistently with the vector-norm variance in the convergence
//! bound). Both conventions are implemented because the source formulas
//! reuse one symbol for both quantities; every output labels the active
//! convention.
//!
//! [`optimize_operating_point`] sweeps a distortion grid, prices each
//! feasible point (`T` from the bound, bits summed over a possibly
//! time-varying variance schedule), refines around the best grid point by
//! golden section, and returns the full curve for plotting. Total bits
//! blow up at both ends — near the distortion floor each iteration costs
//! unboundedly many bits, and at large `D` the iteration count diverges
//! while per-iteration bits stay positive — so a wide grid has an interior
//! optimum.

use crate::rate_region::{sum_rate_closed_form, sum_rate_numeric, NumericOptions};
use crate::problem::ProblemSpec;
use crate::unit::RateUnit;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Geometry and accuracy targets for a convex training run.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConvexProblemParams {
    /// Domain radius bound: optimization never leaves a ball of radius `A`
    /// around the start, `A² ≥ sup ‖w − w(0)‖²`.
    pub a: f64,
    /// Smoothness constant of the objective.
    pub l: f64,
    /// Target expected suboptimality.
    pub epsilon: f64,
}

impl ConvexProblemParams {
    /// Validate `A > 0`, `L > 0`, `ε > 0` (all finite).
    pub fn new(a: f64, l: f64, epsilon: f64) -> Result<Self> {
        for (name, v) in [("A", a), ("L", l), ("epsilon", epsilon)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(ConvexProblemParams { a, l, epsilon })
    }

    /// Step size the bound's proof prescribes: `η = γ/(L+1)` with
    /// `γ = A√(2/(DT))`; for a variance-free run (`D = 0`) the
    /// variance-driven factor is dropped and `η = 1/(L+1)`.
    pub fn step_size(&self, d: f64, t: u64) -> f64 {
        if d == 0.0 {
            1.0 / (self.l + 1.0)
        } else {
            self.a * (2.0 / (d * t as f64)).sqrt() / (self.l + 1.0)
        }
    }
}

/// How a distortion number `D` is read by the bits formula.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DConvention {
    /// `D` is the per-dimension distortion (matches the closed-form sum
    /// rate's argument verbatim). The default.
    #[serde(rename = "per_dimension_D")]
    PerDimension,
    /// `D` is the total variance budget across the gradient vector; each
    /// dimension receives `D/P`.
    #[serde(rename = "total_D")]
    Total,
}

impl Default for DConvention {
    fn default() -> Self {
        DConvention::PerDimension
    }
}

impl std::fmt::Display for DConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DConvention::PerDimension => "per_dimension_D",
            DConvention::Total => "total_D",
        })
    }
}

impl std::str::FromStr for DConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "per-dim" | "per_dim" | "per-dimension" | "per_dimension" | "per_dimension_d" => {
                Ok(DConvention::PerDimension)
            }
            "total" | "total_d" => Ok(DConvention::Total),
            other => Err(Error::InvalidInput(format!(
                "unknown distortion convention {other:?}; use \"per-dim\" or \"total\""
            ))),
        }
    }
}

/// Expected suboptimality guarantee after `t` steps at estimator variance
/// bound `d`: `A√(2d/t) + L·A²/t`.
pub fn convergence_bound(params: &ConvexProblemParams, d: f64, t: u64) -> Result<f64> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::InvalidInput(format!(
            "estimator variance bound must be nonnegative, got {d}"
        )));
    }
    if t == 0 {
        return Err(Error::InvalidInput("iteration count must be at least 1".into()));
    }
    let tf = t as f64;
    Ok(params.a * (2.0 * d / tf).sqrt() + params.l * params.a * params.a / tf)
}

/// Smallest iteration count whose convergence bound meets `ε`:
/// `ceil(A²(√(D/(2ε²) + L/ε) + √(D/(2ε²)))²)`, nudged upward if
/// floating-point evaluation of the bound still exceeds `ε` at the ceiled
/// value.
pub fn min_iterations(params: &ConvexProblemParams, d: f64) -> Result<u64> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::InvalidInput(format!(
            "estimator variance bound must be nonnegative, got {d}"
        )));
    }
    let s_sq = d / (2.0 * params.epsilon * params.epsilon);
    let root = (s_sq + params.l / params.epsilon).sqrt() + s_sq.sqrt();
    let rhs = params.a * params.a * root * root;
    let mut t = (rhs.ceil() as u64).max(1);
    for _ in 0..64 {
        if convergence_bound(params, d, t)? <= params.epsilon {
            return Ok(t);
        }
        t += 1;
    }
    Err(Error::SolverFailure(format!(
        "iteration bound did not stabilize near T = {t} for D = {d}"
    )))
}

/// Bits one iteration costs for `K` identical devices over `P` dimensions
/// at gradient statistics `(σ²_X(t), σ²_N(t))` and distortion `d` (read
/// per `convention`):
/// `P[−(K/2)log₂(1 − σ²_N/(K·D̃)) + ½log₂(1 + σ²_X/D̃)]`, `D̃ = d` or
/// `d/P`.
///
/// Identical to the closed-form minimum sum rate — planning costs are
/// achievable rates, not estimates.
pub fn bits_per_iteration(
    sigma_x_sq: f64,
    sigma_n_sq: f64,
    devices: usize,
    dims: usize,
    d: f64,
    convention: DConvention,
) -> Result<f64> {
    let d_dim = match convention {
        DConvention::PerDimension => d,
        DConvention::Total => d / dims as f64,
    };
    sum_rate_closed_form(dims, devices, sigma_x_sq, sigma_n_sq, d_dim, RateUnit::Bits)
}

/// Heterogeneous extension of [`bits_per_iteration`]: prices an arbitrary
/// [`ProblemSpec`] by the numeric sum-rate solver (closed form when the
/// instance is identical). The bits formula itself is stated for identical
/// devices; this generalization is an extension, priced by the same rate
/// region.
///
/// `d` is read per `convention`: the total budget handed to the solver is
/// `d · P` under [`DConvention::PerDimension`] and `d` under
/// [`DConvention::Total`].
pub fn bits_per_iteration_spec(
    spec: &ProblemSpec,
    d: f64,
    convention: DConvention,
) -> Result<f64> {
    let d_total = match convention {
        DConvention::PerDimension => d * spec.dims() as f64,
        DConvention::Total => d,
    };
    if spec.is_identical() {
        return bits_per_iteration(
            spec.sigma_x_sq(0),
            spec.sigma_n_sq(0, 0),
            spec.devices(),
            spec.dims(),
            d_total,
            DConvention::Total,
        );
    }
    Ok(sum_rate_numeric(spec, d_total, RateUnit::Bits, &NumericOptions::default())?.sum_rate)
}

/// Order-only bound for `L`-smooth non-convex objectives: after `n`
/// iterations at estimator variance `d`, the averaged squared gradient
/// norm obeys `(1/L)·E‖∇F‖² ≤ c·((F(w₀) − F*)/n + d/L)`. The constant `c`
/// is caller-supplied (the source statement hides it inside `O(·)`); the
/// value orders operating points, it does not certify absolute accuracy.
pub fn nonconvex_bound(
    l: f64,
    f0_minus_fstar: f64,
    n: u64,
    d: f64,
    c: f64,
) -> Result<f64> {
    if !l.is_finite() || l <= 0.0 {
        return Err(Error::InvalidInput(format!("L must be positive, got {l}")));
    }
    if !f0_minus_fstar.is_finite() || f0_minus_fstar < 0.0 {
        return Err(Error::InvalidInput(format!(
            "initial suboptimality must be nonnegative, got {f0_minus_fstar}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidInput("iteration count must be at least 1".into()));
    }
    if !d.is_finite() || d < 0.0 || !c.is_finite() || c <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "need d >= 0 and c > 0, got d = {d}, c = {c}"
        )));
    }
    Ok(c * (f0_minus_fstar / n as f64 + d / l))
}

/// One row of a piecewise-constant variance schedule: from iteration
/// `start` (1-based, inclusive) onward, gradients have per-dimension
/// second moment `sigma_x_sq` and per-device noise `sigma_n_sq`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ScheduleEntry {
    pub start: u64,
    pub sigma_x_sq: f64,
    pub sigma_n_sq: f64,
}

/// Gradient variance statistics over training time, stepwise-constant
/// between listed breakpoints. Gradients shrink as training converges, so
/// late iterations are cheaper to communicate; the schedule carries that
/// into the planner.
#[derive(Clone, Debug, Serialize)]
pub struct VarianceSchedule {
    entries: Vec<ScheduleEntry>,
}

impl VarianceSchedule {
    /// A schedule that never changes.
    pub fn constant(sigma_x_sq: f64, sigma_n_sq: f64) -> Result<Self> {
        Self::from_table(vec![(1, sigma_x_sq, sigma_n_sq)])
    }

    /// Build from `(start_iteration, σ²_X, σ²_N)` rows. The first row must
    /// start at iteration 1 and starts must strictly ascend.
    pub fn from_table(rows: Vec<(u64, f64, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("variance schedule has no rows".into()));
        }
        if rows[0].0 != 1 {
            return Err(Error::InvalidInput(format!(
                "variance schedule must start at iteration 1, got {}",
                rows[0].0
            )));
        }
        let mut entries = Vec::with_capacity(rows.len());
        let mut prev_start = 0;
        for (start, sx, sn) in rows {
            if start <= prev_start {
                return Err(Error::InvalidInput(format!(
                    "schedule starts must strictly ascend; {start} follows {prev_start}"
                )));
            }
            if !sx.is_finite() || sx <= 0.0 || !sn.is_finite() || sn <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "schedule variances must be positive and finite, got ({sx}, {sn}) at \
                     iteration {start}"
                )));
            }
            entries.push(ScheduleEntry {
                start,
                sigma_x_sq: sx,
                sigma_n_sq: sn,
            });
            prev_start = start;
        }
        Ok(VarianceSchedule { entries })
    }

    /// Statistics in force at iteration `t ≥ 1`.
    pub fn at(&self, t: u64) -> (f64, f64) {
        let idx = self
            .entries
            .partition_point(|e| e.start <= t)
            .saturating_sub(1);
        let e = &self.entries[idx];
        (e.sigma_x_sq, e.sigma_n_sq)
    }

    /// The schedule's rows.
    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    /// Constant segments covering iterations `1..=t_max`:
    /// `(iteration count, σ²_X, σ²_N)`.
    pub fn segments_until(&self, t_max: u64) -> Vec<(u64, f64, f64)> {
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.start > t_max {
                break;
            }
            let end = self
                .entries
                .get(i + 1)
                .map_or(t_max, |next| t_max.min(next.start - 1));
            out.push((end - e.start + 1, e.sigma_x_sq, e.sigma_n_sq));
        }
        out
    }

    /// Largest noise variance anywhere in the schedule — the binding value
    /// for distortion feasibility.
    pub fn max_sigma_n_sq(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.sigma_n_sq)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A chosen communication operating point, with its schedule-integrated
/// cost.
#[derive(Clone, Debug, Serialize)]
pub struct CommPlan {
    /// Estimator variance bound the plan runs at (read per `convention`).
    pub d: f64,
    /// Iterations the convergence bound requires at `d`.
    pub t: u64,
    /// Average bits each iteration costs under the schedule
    /// (`total_bits / t`; exactly the constant per-iteration cost for a
    /// constant schedule).
    pub bits_per_iter: f64,
    /// Total bits over the run: `Σ_{t=1..T} bits(t)`.
    pub total_bits: f64,
    /// How `d` is read by the bits formula.
    pub convention: DConvention,
    /// The convergence bound's value at `(d, t)` — at most `epsilon` by
    /// construction.
    pub achieved_bound: f64,
    /// The target the plan was built for.
    pub epsilon: f64,
}

/// One feasible row of the distortion/bits trade-off curve.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TradeoffPoint {
    pub d: f64,
    pub t: u64,
    pub bits_per_iter: f64,
    pub total_bits: f64,
}

/// Total bits to reach `ε` at distortion `d`, or `None` when `d` is
/// infeasible for some scheduled segment.
fn total_bits_at(
    params: &ConvexProblemParams,
    schedule: &VarianceSchedule,
    devices: usize,
    dims: usize,
    d: f64,
    convention: DConvention,
) -> Result<Option<TradeoffPoint>> {
    if !d.is_finite() || d <= 0.0 {
        return Ok(None);
    }
    let t = min_iterations(params, d)?;
    let mut total = 0.0;
    for (count, sx, sn) in schedule.segments_until(t) {
        match bits_per_iteration(sx, sn, devices, dims, d, convention) {
            Ok(bits) => total += count as f64 * bits,
            Err(Error::DistortionBelowFloor { .. }) | Err(Error::DistortionNonpositive { .. }) => {
                return Ok(None)
            }
            Err(other) => return Err(other),
        }
    }
    Ok(Some(TradeoffPoint {
        d,
        t,
        bits_per_iter: total / t as f64,
        total_bits: total,
    }))
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Sweep `d_grid`, price every feasible point, golden-section refine
/// around the best one, and return the chosen [`CommPlan`] together with
/// the feasible trade-off curve (in grid order).
///
/// Errors with [`Error::EmptyFeasibleGrid`] when no grid point is
/// feasible for the whole schedule.
pub fn optimize_operating_point(
    params: &ConvexProblemParams,
    schedule: &VarianceSchedule,
    devices: usize,
    dims: usize,
    d_grid: &[f64],
    convention: DConvention,
) -> Result<(CommPlan, Vec<TradeoffPoint>)> {
    if d_grid.is_empty() {
        return Err(Error::InvalidInput("distortion grid is empty".into()));
    }
    let mut curve = Vec::with_capacity(d_grid.len());
    for &d in d_grid {
        if let Some(point) = total_bits_at(params, schedule, devices, dims, d, convention)? {
            curve.push(point);
        }
    }
    if curve.is_empty() {
        return Err(Error::EmptyFeasibleGrid);
    }
    let best_idx = (0..curve.len())
        .min_by(|&i, &j| curve[i].total_bits.total_cmp(&curve[j].total_bits))
        .expect("curve is nonempty");
    let mut best = curve[best_idx];

    // Refine between the best point's feasible neighbors. The integer
    // iteration count makes the objective a step function at fine scales;
    // golden section still homes in on the basin, and the final take is
    // whichever evaluated point wins.
    let lo = if best_idx > 0 { curve[best_idx - 1].d } else { best.d };
    let hi = if best_idx + 1 < curve.len() {
        curve[best_idx + 1].d
    } else {
        best.d
    };
    if hi > lo {
        let (mut a, mut b) = (lo, hi);
        let mut x1 = b - INV_PHI * (b - a);
        let mut x2 = a + INV_PHI * (b - a);
        let eval = |d: f64| -> Result<f64> {
            Ok(total_bits_at(params, schedule, devices, dims, d, convention)?
                .map_or(f64::INFINITY, |p| p.total_bits))
        };
        let mut f1 = eval(x1)?;
        let mut f2 = eval(x2)?;
        for _ in 0..80 {
            if (b - a) <= 1e-10 * hi {
                break;
            }
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - INV_PHI * (b - a);
                f1 = eval(x1)?;
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + INV_PHI * (b - a);
                f2 = eval(x2)?;
            }
        }
        let mid = 0.5 * (a + b);
        if let Some(point) = total_bits_at(params, schedule, devices, dims, mid, convention)? {
            if point.total_bits < best.total_bits {
                best = point;
            }
        }
    }

    let achieved_bound = convergence_bound(params, best.d, best.t)?;
    if achieved_bound > params.epsilon * (1.0 + 1e-12) {
        return Err(Error::SolverFailure(format!(
            "plan at D = {} fails its own bound: {achieved_bound} > {}",
            best.d, params.epsilon
        )));
    }
    let plan = CommPlan {
        d: best.d,
        t: best.t,
        bits_per_iter: best.bits_per_iter,
        total_bits: best.total_bits,
        convention,
        achieved_bound,
        epsilon: params.epsilon,
    };
    Ok((plan, curve))
}
