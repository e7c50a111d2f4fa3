//! Sum-rate–distortion functions: closed form, numeric, inverse, and the
//! classic-region comparison value.
//!
//! The minimum sum rate at a total budget `D_total` splits the budget over
//! dimensions and water-fills each one:
//!
//! ```text
//!     R_sum(D_total) = min_{Σ_p D_p = D_total}  Σ_p [ Σ_k r_{k,p}(D_p)
//!                      + ½ log(1 + σ²_{X_p}/D_p) ]
//! ```
//!
//! Each per-dimension term is convex and strictly decreasing in `D_p`, so
//! the outer problem is solved by bisection on a Lagrange multiplier `μ`
//! that equalizes the marginal rate savings `−dR_p/dD_p`; by the envelope
//! theorem that marginal is `λ_p(D_p)/D_p² + σ²_{X_p}/(2 D_p (D_p +
//! σ²_{X_p}))` with `λ_p` the water level of the inner problem. A
//! golden-section coordinate-descent fallback covers the (numerically
//! pathological) case where the multiplier map loses monotonicity.
//!
//! For instances where every device and dimension share one `(σ²_X, σ²_N)`
//! pair the optimum is the equal split and the sum rate collapses to the
//! closed form
//!
//! ```text
//!     R_sum(D) = P [ −(K/2) log(1 − σ²_N/(K·D)) + ½ log(1 + σ²_X/D) ],
//! ```
//!
//! `D` per dimension, valid for `D > σ²_N/K`. The classic (biased-
//! estimator) counterpart used for comparisons is zero for `D ≥ σ²_X` and
//! otherwise `P [ −(K/2) log(1 − (σ²_N/K)(1/D − 1/σ²_X)) + ½ log(σ²_X/D) ]`.

use super::waterfill::{water_level, waterfill_noise_rates};
use super::{
    distortion_floor, total_distortion_floor, DistortionAllocation, RateAllocation, SumRateResult,
};
use crate::problem::ProblemSpec;
use crate::unit::RateUnit;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

/// Which path produced a [`SumRateResult`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    /// Identical-instance closed form.
    ClosedForm,
    /// General numeric solver.
    Numeric,
}

/// Iteration counts and achieved residuals for a numeric solve.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SolverStats {
    /// Outer multiplier bisection steps (0 for P = 1 or closed form).
    pub outer_iterations: u32,
    /// Total water-level evaluations across all inner solves.
    pub inner_evaluations: u64,
    /// Worst per-dimension balance residual of the final rates.
    pub max_balance_residual: f64,
    /// True when the golden-section coordinate fallback produced the split.
    pub fallback_used: bool,
}

/// Tunables for the numeric solvers. The defaults match the documented
/// tolerances; tests poke `force_fallback`.
#[derive(Clone, Debug)]
pub struct NumericOptions {
    /// Relative tolerance on `Σ_p D_p = D_total` for the outer solve.
    pub budget_rel_tol: f64,
    /// Cap on outer bisection steps.
    pub max_outer_iterations: u32,
    /// Skip the multiplier path and use coordinate descent directly.
    pub force_fallback: bool,
    /// Ceiling (in bits) for `distortion_for_sum_rate` targets.
    pub rate_ceiling_bits: f64,
    /// Relative tolerance on the achieved rate for the inverse solve.
    pub inverse_rel_tol: f64,
}

impl Default for NumericOptions {
    fn default() -> Self {
        NumericOptions {
            budget_rel_tol: 1e-12,
            max_outer_iterations: 200,
            force_fallback: false,
            rate_ceiling_bits: 1e6,
            inverse_rel_tol: 1e-6,
        }
    }
}

fn check_identical_args(
    dims: usize,
    devices: usize,
    sigma_x_sq: f64,
    sigma_n_sq: f64,
) -> Result<()> {
    if dims == 0 || devices == 0 {
        return Err(Error::InvalidInput(
            "need at least one dimension and one device".into(),
        ));
    }
    if !sigma_x_sq.is_finite() || sigma_x_sq <= 0.0 || !sigma_n_sq.is_finite() || sigma_n_sq <= 0.0
    {
        return Err(Error::InvalidInput(format!(
            "variances must be positive and finite, got sigma_X_sq = {sigma_x_sq}, \
             sigma_N_sq = {sigma_n_sq}"
        )));
    }
    Ok(())
}

/// Closed-form minimum sum rate for an identical instance (`P` dimensions,
/// `K` devices, shared `σ²_X`/`σ²_N`), with `d` the *per-dimension*
/// distortion. Valid for `d > σ²_N/K` (the floor); the value has a pole at
/// the floor and stays strictly positive for every finite `d`.
pub fn sum_rate_closed_form(
    dims: usize,
    devices: usize,
    sigma_x_sq: f64,
    sigma_n_sq: f64,
    d: f64,
    unit: RateUnit,
) -> Result<f64> {
    check_identical_args(dims, devices, sigma_x_sq, sigma_n_sq)?;
    if !d.is_finite() || d <= 0.0 {
        return Err(Error::DistortionNonpositive { d });
    }
    let k = devices as f64;
    let floor = sigma_n_sq / k;
    if d <= floor {
        return Err(Error::DistortionBelowFloor {
            dimension: 0,
            d,
            floor,
        });
    }
    let noise_term = -(k / 2.0) * unit.log(1.0 - sigma_n_sq / (k * d));
    let source_term = 0.5 * unit.log(1.0 + sigma_x_sq / d);
    Ok(dims as f64 * (noise_term + source_term))
}

/// Closed-form solve packaged as a full [`SumRateResult`] (equal split,
/// identical water-filling rates). Requires an identical instance.
pub fn sum_rate_closed_form_result(
    spec: &ProblemSpec,
    d_total: f64,
    unit: RateUnit,
) -> Result<SumRateResult> {
    if !spec.is_identical() {
        return Err(Error::InvalidInput(
            "closed form requires an identical instance (shared sigma_X_sq and sigma_N_sq)".into(),
        ));
    }
    let dims = spec.dims();
    let devices = spec.devices();
    let sigma_x_sq = spec.sigma_x_sq(0);
    let sigma_n_sq = spec.sigma_n_sq(0, 0);
    if !d_total.is_finite() || d_total <= 0.0 {
        return Err(Error::DistortionNonpositive { d: d_total });
    }
    let d = d_total / dims as f64;
    let per_dim = sum_rate_closed_form(1, devices, sigma_x_sq, sigma_n_sq, d, unit)?;

    // Identical water-filling: every device quantizes at
    // r = -1/2 log(1 - sigma_N_sq/(K d)).
    let r = -0.5 * unit.log(1.0 - sigma_n_sq / (devices as f64 * d));
    let columns = vec![vec![r; devices]; dims];
    let rates = RateAllocation::from_columns(spec, columns, unit)?;
    let allocation = DistortionAllocation::new(spec, vec![d; dims], d_total)?;
    let per_dim_rate = vec![per_dim; dims];
    Ok(SumRateResult {
        sum_rate: per_dim * dims as f64,
        unit,
        per_dim_rate,
        allocation,
        rates,
        method: SolveMethod::ClosedForm,
        stats: SolverStats::default(),
    })
}

/// Marginal rate savings `−dR_p/dD_p` in nats, via the envelope theorem:
/// `λ_p(D)/D² + σ²_X/(2 D (D + σ²_X))`. Strictly decreasing in `D`.
fn marginal_nats(
    noise: &[f64],
    sigma_x_sq: f64,
    d: f64,
    evals: &mut u64,
) -> Result<f64> {
    let (t, e) = water_level(noise, 1.0 / d)?;
    *evals += e as u64;
    let lambda = 0.5 * t;
    Ok(lambda / (d * d) + sigma_x_sq / (2.0 * d * (d + sigma_x_sq)))
}

/// Per-dimension rate in nats at distortion `d` (inner objective value),
/// used by the coordinate-descent fallback.
fn dim_rate_nats(noise: &[f64], sigma_x_sq: f64, d: f64, evals: &mut u64) -> Result<f64> {
    let (t, e) = water_level(noise, 1.0 / d)?;
    *evals += e as u64;
    let rate_sum: f64 = noise
        .iter()
        .map(|&s| if s < t { 0.5 * (t / s).ln() } else { 0.0 })
        .sum();
    Ok(rate_sum + 0.5 * (1.0 + sigma_x_sq / d).ln())
}

/// Solve `marginal_nats(d) = mu` for `d ∈ (floor, ∞)` by bisection.
fn d_for_marginal(
    noise: &[f64],
    sigma_x_sq: f64,
    floor: f64,
    d_seed: f64,
    mu: f64,
    evals: &mut u64,
) -> Result<f64> {
    let mut lo = floor * (1.0 + 1e-13);
    let mut hi = d_seed.max(2.0 * floor);
    for _ in 0..2048 {
        if marginal_nats(noise, sigma_x_sq, hi, evals)? < mu {
            break;
        }
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::SolverFailure(
                "distortion bracket expansion overflowed".into(),
            ));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || (hi - lo) <= 1e-13 * hi {
            break;
        }
        if marginal_nats(noise, sigma_x_sq, mid, evals)? > mu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

const INV_PHI: f64 = 0.618_033_988_749_894_9; // (sqrt(5) - 1) / 2

/// Golden-section minimization of a unimodal scalar function on `[a, b]`.
fn golden_section<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    xtol: f64,
) -> Result<f64> {
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    for _ in 0..300 {
        if (b - a) <= xtol {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Coordinate-descent fallback: pairwise golden-section reallocation of
/// the budget until no pair improves.
fn split_by_coordinate_descent(
    spec: &ProblemSpec,
    floors: &[f64],
    d_total: f64,
    evals: &mut u64,
) -> Result<Vec<f64>> {
    let dims = spec.dims();
    let slack = d_total - floors.iter().sum::<f64>();
    let mut d: Vec<f64> = floors.iter().map(|&f| f + slack / dims as f64).collect();
    let columns: Vec<Vec<f64>> = (0..dims).map(|p| spec.noise_column(p)).collect();

    for _ in 0..200 {
        let mut largest_move = 0.0_f64;
        for i in 0..dims {
            for j in (i + 1)..dims {
                let budget = d[i] + d[j];
                let lo = floors[i] * (1.0 + 1e-12);
                let hi = budget - floors[j] * (1.0 + 1e-12);
                if hi <= lo {
                    continue;
                }
                let xi = golden_section(
                    |x| {
                        Ok(dim_rate_nats(&columns[i], spec.sigma_x_sq(i), x, evals)?
                            + dim_rate_nats(&columns[j], spec.sigma_x_sq(j), budget - x, evals)?)
                    },
                    lo,
                    hi,
                    1e-12 * budget,
                )?;
                largest_move = largest_move.max((xi - d[i]).abs());
                d[i] = xi;
                d[j] = budget - xi;
            }
        }
        if largest_move <= 1e-13 * d_total {
            break;
        }
    }
    Ok(d)
}

/// Optimal budget split by bisection on the shared marginal `μ`. Returns
/// `(split, outer_iterations)`; errs on the feasible side (`Σ D_p ≤
/// D_total`) and rescales to hit the budget exactly.
fn split_by_multiplier(
    spec: &ProblemSpec,
    floors: &[f64],
    d_total: f64,
    opts: &NumericOptions,
    evals: &mut u64,
) -> Result<(Vec<f64>, u32)> {
    let dims = spec.dims();
    let columns: Vec<Vec<f64>> = (0..dims).map(|p| spec.noise_column(p)).collect();
    let slack = d_total - floors.iter().sum::<f64>();

    let split_at = |mu: f64, evals: &mut u64| -> Result<Vec<f64>> {
        (0..dims)
            .map(|p| {
                d_for_marginal(
                    &columns[p],
                    spec.sigma_x_sq(p),
                    floors[p],
                    d_total,
                    mu,
                    evals,
                )
            })
            .collect()
    };

    // mu_lo: flattest marginal at the full budget -> every dimension gets
    // at least that much, so the split sum overshoots the budget.
    let mut mu_lo = f64::INFINITY;
    let mut mu_hi = 0.0_f64;
    for p in 0..dims {
        let at_full = marginal_nats(&columns[p], spec.sigma_x_sq(p), d_total, evals)?;
        let near_floor = marginal_nats(
            &columns[p],
            spec.sigma_x_sq(p),
            floors[p] + slack / dims as f64,
            evals,
        )?;
        mu_lo = mu_lo.min(at_full);
        mu_hi = mu_hi.max(near_floor);
    }
    mu_lo *= 0.5; // margin so the bracket is strict
    mu_hi *= 2.0;

    let mut sum_lo = split_at(mu_lo, evals)?.iter().sum::<f64>();
    let mut best_under: Option<Vec<f64>> = None;
    let hi_split = split_at(mu_hi, evals)?;
    let mut sum_hi = hi_split.iter().sum::<f64>();
    if sum_hi <= d_total {
        best_under = Some(hi_split);
    }
    if !(sum_lo >= d_total && sum_hi <= d_total) {
        return Err(Error::SolverFailure(format!(
            "multiplier bracket failed: sums ({sum_lo}, {sum_hi}) do not straddle {d_total}"
        )));
    }

    let mut iterations = 0;
    for _ in 0..opts.max_outer_iterations {
        iterations += 1;
        let mu = 0.5 * (mu_lo + mu_hi);
        let split = split_at(mu, evals)?;
        let sum: f64 = split.iter().sum();
        // The multiplier map must stay monotone within the bracket; a
        // violation routes to the fallback.
        if sum > sum_lo * (1.0 + 1e-9) || sum < sum_hi * (1.0 - 1e-9) {
            return Err(Error::SolverFailure(
                "multiplier map lost monotonicity".into(),
            ));
        }
        if sum <= d_total {
            best_under = Some(split);
            mu_hi = mu;
            sum_hi = sum;
        } else {
            mu_lo = mu;
            sum_lo = sum;
        }
        if (sum - d_total).abs() <= opts.budget_rel_tol * d_total {
            break;
        }
        if (mu_hi - mu_lo) <= f64::EPSILON * mu_hi {
            break;
        }
    }

    let mut split = best_under.ok_or_else(|| {
        Error::SolverFailure("no feasible split found on the under side".into())
    })?;
    // Rescale the feasible split onto the exact budget (scale >= 1 moves
    // every dimension further from its floor, so feasibility is kept; the
    // objective penalty is second-order in the bisection gap).
    let sum: f64 = split.iter().sum();
    let scale = d_total / sum;
    for d in &mut split {
        *d *= scale;
    }
    Ok((split, iterations))
}

/// Assemble a [`SumRateResult`] from a final split: water-fill every
/// dimension, add the source terms, collect diagnostics.
fn assemble(
    spec: &ProblemSpec,
    d_p: Vec<f64>,
    d_total: f64,
    unit: RateUnit,
    mut stats: SolverStats,
) -> Result<SumRateResult> {
    let dims = spec.dims();
    let mut columns = Vec::with_capacity(dims);
    let mut per_dim_rate = Vec::with_capacity(dims);
    for p in 0..dims {
        let w = waterfill_noise_rates(spec, p, d_p[p], unit)?;
        stats.inner_evaluations += w.evaluations as u64;
        stats.max_balance_residual = stats.max_balance_residual.max(w.balance_residual);
        let rate_sum: f64 = w.rates.iter().sum();
        per_dim_rate.push(rate_sum + 0.5 * unit.log(1.0 + spec.sigma_x_sq(p) / d_p[p]));
        columns.push(w.rates);
    }
    let rates = RateAllocation::from_columns(spec, columns, unit)?;
    let allocation = DistortionAllocation::new(spec, d_p, d_total)?;
    Ok(SumRateResult {
        sum_rate: per_dim_rate.iter().sum(),
        unit,
        per_dim_rate,
        allocation,
        rates,
        method: SolveMethod::Numeric,
        stats,
    })
}

/// Minimum sum rate at total distortion budget `d_total` for a general
/// (heterogeneous) instance: optimal budget split plus per-dimension
/// water-filling. The result carries the full certificate.
pub fn sum_rate_numeric(
    spec: &ProblemSpec,
    d_total: f64,
    unit: RateUnit,
    opts: &NumericOptions,
) -> Result<SumRateResult> {
    if !d_total.is_finite() || d_total <= 0.0 {
        return Err(Error::DistortionNonpositive { d: d_total });
    }
    let floors: Vec<f64> = (0..spec.dims()).map(|p| distortion_floor(spec, p)).collect();
    let floor_sum: f64 = floors.iter().sum();
    if d_total <= floor_sum {
        return Err(Error::InfeasibleTotalDistortion {
            d_total,
            floor_sum,
        });
    }

    let mut evals: u64 = 0;
    if spec.dims() == 1 {
        return assemble(spec, vec![d_total], d_total, unit, SolverStats::default());
    }

    if !opts.force_fallback {
        match split_by_multiplier(spec, &floors, d_total, opts, &mut evals) {
            Ok((split, outer_iterations)) => {
                let stats = SolverStats {
                    outer_iterations,
                    inner_evaluations: evals,
                    max_balance_residual: 0.0,
                    fallback_used: false,
                };
                return assemble(spec, split, d_total, unit, stats);
            }
            Err(Error::SolverFailure(_)) => { /* fall through to coordinate descent */ }
            Err(other) => return Err(other),
        }
    }

    let split = split_by_coordinate_descent(spec, &floors, d_total, &mut evals)?;
    let stats = SolverStats {
        outer_iterations: 0,
        inner_evaluations: evals,
        max_balance_residual: 0.0,
        fallback_used: true,
    };
    assemble(spec, split, d_total, unit, stats)
}

/// Smallest total distortion whose minimum sum rate is `r_target`
/// (bisection on the strictly decreasing `D ↦ R_sum(D)`), to relative
/// tolerance `opts.inverse_rel_tol` on the rate. Errors with
/// [`Error::RateUnreachable`] for targets above the configured ceiling.
pub fn distortion_for_sum_rate(
    spec: &ProblemSpec,
    r_target: f64,
    unit: RateUnit,
    opts: &NumericOptions,
) -> Result<SumRateResult> {
    if !r_target.is_finite() || r_target <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "target sum rate must be positive and finite, got {r_target}"
        )));
    }
    let ceiling = RateUnit::Bits.convert(opts.rate_ceiling_bits, unit);
    if r_target > ceiling {
        return Err(Error::RateUnreachable {
            target: r_target,
            ceiling,
        });
    }

    let floor_sum = total_distortion_floor(spec);
    // Low-distortion side: walk toward the floor until the rate exceeds
    // the target.
    let mut delta = 1e-2;
    let mut d_lo = floor_sum * (1.0 + delta);
    let mut r_lo = sum_rate_numeric(spec, d_lo, unit, opts)?;
    while r_lo.sum_rate < r_target {
        delta /= 16.0;
        if delta < 1e-14 {
            return Err(Error::RateUnreachable {
                target: r_target,
                ceiling: r_lo.sum_rate,
            });
        }
        d_lo = floor_sum * (1.0 + delta);
        r_lo = sum_rate_numeric(spec, d_lo, unit, opts)?;
    }
    if (r_lo.sum_rate - r_target).abs() <= opts.inverse_rel_tol * r_target {
        return Ok(r_lo);
    }

    // High-distortion side: double until the rate drops below the target.
    let mut d_hi = (2.0 * floor_sum).max(2.0 * spec.total_source_variance());
    let mut r_hi = sum_rate_numeric(spec, d_hi, unit, opts)?;
    let mut guard = 0;
    while r_hi.sum_rate > r_target {
        d_hi *= 2.0;
        guard += 1;
        if guard > 2000 || !d_hi.is_finite() {
            return Err(Error::SolverFailure(format!(
                "no distortion reached sum rate {r_target}"
            )));
        }
        r_hi = sum_rate_numeric(spec, d_hi, unit, opts)?;
    }

    let mut best = r_hi;
    for _ in 0..200 {
        let mid = 0.5 * (d_lo + d_hi);
        let r_mid = sum_rate_numeric(spec, mid, unit, opts)?;
        if (r_mid.sum_rate - r_target).abs() <= opts.inverse_rel_tol * r_target {
            return Ok(r_mid);
        }
        if r_mid.sum_rate > r_target {
            d_lo = mid;
        } else {
            d_hi = mid;
            best = r_mid;
        }
        if (d_hi - d_lo) <= 1e-13 * d_hi {
            break;
        }
    }
    if (best.sum_rate - r_target).abs() <= opts.inverse_rel_tol * r_target {
        Ok(best)
    } else {
        Err(Error::SolverFailure(format!(
            "inverse solve stalled at rate {} for target {r_target}",
            best.sum_rate
        )))
    }
}

/// Distortion floor of the classic (biased) region for an identical
/// instance: `(1/σ²_X + K/σ²_N)⁻¹`, strictly below the unbiased floor.
pub fn classic_floor(sigma_x_sq: f64, sigma_n_sq: f64, devices: usize) -> f64 {
    1.0 / (1.0 / sigma_x_sq + devices as f64 / sigma_n_sq)
}

/// Sum rate of the classic (biased-estimator) region for an identical
/// instance at per-dimension distortion `d` — the comparison value showing
/// what the unbiasedness constraint costs. Zero for `d ≥ σ²_X` (the prior
/// alone suffices); never used by the unbiased solvers.
pub fn classic_comparison_sum_rate(
    dims: usize,
    devices: usize,
    sigma_x_sq: f64,
    sigma_n_sq: f64,
    d: f64,
    unit: RateUnit,
) -> Result<f64> {
    check_identical_args(dims, devices, sigma_x_sq, sigma_n_sq)?;
    if !d.is_finite() || d <= 0.0 {
        return Err(Error::DistortionNonpositive { d });
    }
    if d >= sigma_x_sq {
        return Ok(0.0);
    }
    let floor = classic_floor(sigma_x_sq, sigma_n_sq, devices);
    if d <= floor {
        return Err(Error::DistortionBelowFloor {
            dimension: 0,
            d,
            floor,
        });
    }
    let k = devices as f64;
    let noise_term = -(k / 2.0) * unit.log(1.0 - (sigma_n_sq / k) * (1.0 / d - 1.0 / sigma_x_sq));
    let source_term = 0.5 * unit.log(sigma_x_sq / d);
    Ok(dims as f64 * (noise_term + source_term))
}

/// Sum rate over a distortion grid, evaluated in parallel. Output order
/// matches the input grid; infeasible points carry their error.
pub fn tradeoff_curve(
    spec: &ProblemSpec,
    d_grid: &[f64],
    unit: RateUnit,
    opts: &NumericOptions,
) -> Vec<(f64, Result<SumRateResult>)> {
    d_grid
        .par_iter()
        .map(|&d| (d, sum_rate_numeric(spec, d, unit, opts)))
        .collect()
}
