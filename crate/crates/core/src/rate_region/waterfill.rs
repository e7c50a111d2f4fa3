//! Minimum-sum-rate noise quantization for one dimension (water-filling).
//!
//! Fix a dimension with device noise variances `σ²_1, …, σ²_K` and a
//! distortion target `D` above the floor. The cheapest rates satisfying
//! the balance `Σ_k (1 − e^{−2 r_k})/σ²_k = 1/D` solve
//!
//! ```text
//!     minimize Σ_k r_k   s.t.  Σ_k (1 − e^{−2 r_k})/σ²_k = 1/D,  r_k ≥ 0
//! ```
//!
//! whose stationarity condition is a water level `2λ` shared by every
//! device that speaks at all:
//!
//! ```text
//!     r_k = ½ log(2λ / σ²_k)   if σ²_k < 2λ,     r_k = 0 otherwise,
//! ```
//!
//! i.e. active devices share `σ²_k · e^{2 r_k} = 2λ` and noisier devices
//! fall silent first. The level is found by bisection on λ (the precision
//! bought, `h(λ) = Σ_k max(0, 1/σ²_k − 1/(2λ))`, is strictly increasing),
//! and once the bisection bracket pins the active set `A` the level is
//! re-derived in closed form from `1/(2λ) = (Σ_{A} 1/σ²_k − 1/D)/|A|`,
//! which drops the balance residual from the bisection tolerance (~1e-10)
//! to floating-point roundoff.

use super::{distortion_floor, rate_precision_sum};
use crate::problem::ProblemSpec;
use crate::unit::RateUnit;
use crate::{Error, Result};
use serde::Serialize;

/// Water-filling output for one dimension.
#[derive(Clone, Debug, Serialize)]
pub struct Waterfill {
    /// Noise-quantization rate per device, in `unit`.
    pub rates: Vec<f64>,
    /// Unit of `rates`.
    pub unit: RateUnit,
    /// Water level multiplier λ (unit-independent: `2λ = σ²_k e^{2 r_k}`
    /// with `r_k` in nats, for every active device).
    pub lambda: f64,
    /// Distortion the returned rates induce (equals the target to within
    /// roundoff).
    pub induced_d: f64,
    /// Achieved `|Σ_k (1 − e^{−2 r_k})/σ²_k − 1/D|`.
    pub balance_residual: f64,
    /// Number of water-level evaluations spent.
    pub evaluations: u32,
}

/// Precision bought at water level `t = 2λ`: `Σ_k max(0, 1/σ²_k − 1/t)`.
#[inline]
fn precision_at_level(noise: &[f64], t: f64) -> f64 {
    noise
        .iter()
        .map(|&s| if s < t { 1.0 / s - 1.0 / t } else { 0.0 })
        .sum()
}

/// Find the water level `t = 2λ` with `precision_at_level(t) = c` for a
/// target precision `0 < c < Σ_k 1/σ²_k`. Returns `(t, evaluations)`.
///
/// Bisection narrows the bracket until no device threshold `σ²_k` lies
/// inside it; the level is then exact from the active set.
pub(crate) fn water_level(noise: &[f64], c: f64) -> Result<(f64, u32)> {
    let mut evals: u32 = 0;
    let t_min = noise.iter().cloned().fold(f64::INFINITY, f64::min);
    let t_max_seed = noise.iter().cloned().fold(0.0_f64, f64::max);

    // Bracket: h(t_min) = 0 < c; expand upward until h ≥ c (the limit
    // Σ 1/σ² exceeds c, so the root is at finite t).
    let mut lo = t_min;
    let mut hi = 2.0 * t_max_seed.max(t_min);
    for _ in 0..4096 {
        evals += 1;
        if precision_at_level(noise, hi) >= c {
            break;
        }
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::SolverFailure(
                "water-level bracket expansion overflowed".into(),
            ));
        }
    }

    let active_at_most = |t: f64| noise.iter().filter(|&&s| s <= t).count();
    let active_below = |t: f64| noise.iter().filter(|&&s| s < t).count();

    for _ in 0..256 {
        // Once no device threshold separates the bracket ends, the active
        // set is pinned and the level is exact.
        let m_lo = active_at_most(lo);
        let m_hi = active_below(hi);
        if m_lo == m_hi && m_hi > 0 {
            let m = m_hi as f64;
            let s_a: f64 = noise.iter().filter(|&&s| s < hi).map(|&s| 1.0 / s).sum();
            let denom = s_a - c;
            if denom > 0.0 {
                let t = (m / denom).clamp(lo, hi);
                return Ok((t, evals));
            }
            // Degenerate roundoff corner: fall back to the bracket center.
            return Ok((0.5 * (lo + hi), evals));
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok((mid, evals)); // bracket exhausted at fp resolution
        }
        evals += 1;
        if precision_at_level(noise, mid) < c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::SolverFailure(
        "water-level bisection did not converge".into(),
    ))
}

/// Minimum-sum-rate allocation on dimension `p` at distortion target
/// `d_p`: the water-filling rates, their multiplier and diagnostics.
///
/// Errors with [`Error::DistortionNonpositive`] for `d_p ≤ 0` and
/// [`Error::DistortionBelowFloor`] when `d_p` is at or below
/// [`distortion_floor`].
pub fn waterfill_noise_rates(
    spec: &ProblemSpec,
    p: usize,
    d_p: f64,
    unit: RateUnit,
) -> Result<Waterfill> {
    if !d_p.is_finite() || d_p <= 0.0 {
        return Err(Error::DistortionNonpositive { d: d_p });
    }
    let floor = distortion_floor(spec, p);
    if d_p <= floor {
        return Err(Error::DistortionBelowFloor {
            dimension: p,
            d: d_p,
            floor,
        });
    }

    let noise = spec.noise_column(p);
    let c = 1.0 / d_p;
    let (t, evaluations) = water_level(&noise, c)?;

    let rates: Vec<f64> = noise
        .iter()
        .map(|&s| if s < t { 0.5 * unit.log(t / s) } else { 0.0 })
        .collect();

    let precision = rate_precision_sum(spec, p, &rates, unit)?;
    Ok(Waterfill {
        rates,
        unit,
        lambda: 0.5 * t,
        induced_d: 1.0 / precision,
        balance_residual: (precision - c).abs(),
        evaluations,
    })
}
