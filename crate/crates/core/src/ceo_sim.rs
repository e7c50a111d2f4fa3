//! Monte Carlo verification that a rate allocation's promised distortion
//! is operationally achievable by an unbiased estimator.
//!
//! A noise-quantization rate `r` for a device with observation noise
//! `σ²_N` corresponds to the Gaussian test channel `U = G + N + V`,
//! `V ~ N(0, τ)` with
//!
//! ```text
//!     τ = σ²_N · e^{−2r} / (1 − e^{−2r}),
//! ```
//!
//! chosen exactly so that `1/(σ²_N + τ) = (1 − e^{−2r})/σ²_N` — the
//! device's precision contribution in the rate region's balance identity.
//! The server combines descriptions with inverse-variance weights
//! `w_k ∝ 1/(σ²_{N_k} + τ_k)`, `Σ w_k = 1`: conditionally unbiased for
//! every realization of the source, with mean-squared error exactly the
//! induced distortion `1/Σ_k 1/(σ²_{N_k}+τ_k)`.
//!
//! [`simulate_ceo`] draws the full pipeline at sample scale and reports
//! empirical MSE (with a normal-approximation confidence interval) and the
//! regression of estimates on the true source, whose slope/intercept
//! certify unbiasedness. [`simulate_dithered_quantizer`] swaps each
//! Gaussian `V_k` for subtractive-dither uniform quantization with matched
//! variance (`Δ²/12 = τ`) — an *operational* encoder — and reports the
//! empirical entropy of the quantizer indices next to `r_k`. Without
//! binning the entropy can sit well above `r_k` when the common source
//! component dominates the observation; the gap is recorded, not asserted.
//!
//! All randomness is keyed by `(seed, site, dimension, device, sample)`,
//! so results are bit-identical under any parallel schedule.

use crate::problem::ProblemSpec;
use crate::rate_region::RateAllocation;
use crate::rng::{normal_at, site, Stream};
use crate::unit::{RateUnit, LN_2};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

/// Fewest Monte Carlo rounds the confidence machinery is trusted with.
pub const MIN_SAMPLES: usize = 1_000;

/// Test-channel noise variance for one device:
/// `τ = σ²_N e^{−2r}/(1 − e^{−2r})`, with `r` interpreted in `unit`.
///
/// Strictly decreasing in `r`, `τ → ∞` as `r → 0` (hence
/// [`Error::ZeroRate`]) and `τ → 0` as `r → ∞`.
pub fn test_channel_variance(sigma_n_sq: f64, r: f64, unit: RateUnit) -> Result<f64> {
    if !sigma_n_sq.is_finite() || sigma_n_sq <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "observation noise variance must be positive, got {sigma_n_sq}"
        )));
    }
    if !r.is_finite() || r < 0.0 {
        return Err(Error::InvalidInput(format!(
            "rate must be nonnegative and finite, got {r}"
        )));
    }
    if r == 0.0 {
        return Err(Error::ZeroRate);
    }
    let e = unit.exp_neg2(r);
    Ok(sigma_n_sq * e / (1.0 - e))
}

/// Inverse-variance combiner weights for effective per-device variances
/// `σ²_{N_k} + τ_k`: `w_k = (1/(σ²_{N_k}+τ_k)) / Σ_j (1/(σ²_{N_j}+τ_j))`.
///
/// An infinite `τ_k` (silent device) is accepted and yields weight exactly
/// zero. The weights sum to 1 *exactly*: the last positively-weighted
/// entry absorbs the closure so floating-point round-off cannot break
/// unbiasedness.
pub fn unbiased_weights(sigma_n_sq: &[f64], tau: &[f64]) -> Result<Vec<f64>> {
    if sigma_n_sq.len() != tau.len() || sigma_n_sq.is_empty() {
        return Err(Error::InvalidInput(
            "sigma_N_sq and tau must be equal-length, nonempty lists".into(),
        ));
    }
    let mut precision = Vec::with_capacity(tau.len());
    for (k, (&s, &t)) in sigma_n_sq.iter().zip(tau).enumerate() {
        if !s.is_finite() || s <= 0.0 || t.is_nan() || t < 0.0 {
            return Err(Error::InvalidInput(format!(
                "device {k}: need positive finite sigma_N_sq and nonnegative tau, \
                 got ({s}, {t})"
            )));
        }
        precision.push(if t.is_infinite() { 0.0 } else { 1.0 / (s + t) });
    }
    weights_from_precisions(&precision)
}

/// Normalize nonnegative precision contributions into weights that sum to
/// 1 exactly (closure on the last positive entry).
fn weights_from_precisions(precision: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = precision.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput(
            "all devices have zero precision; no unbiased combiner exists".into(),
        ));
    }
    let mut weights: Vec<f64> = precision.iter().map(|&q| q / total).collect();
    let last_active = precision
        .iter()
        .rposition(|&q| q > 0.0)
        .expect("total > 0 implies an active device");
    let others: f64 = weights
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != last_active)
        .map(|(_, &w)| w)
        .sum();
    weights[last_active] = 1.0 - others;
    Ok(weights)
}

/// The test channels and combiner realizing one dimension of a rate
/// allocation.
#[derive(Clone, Debug, Serialize)]
pub struct TestChannelAllocation {
    /// Test-channel noise variance per device; `+∞` for silent (zero-rate)
    /// devices.
    pub tau: Vec<f64>,
    /// Unbiased combiner weights; sum to 1 exactly, zero for silent
    /// devices.
    pub weights: Vec<f64>,
    /// Mean-squared error of the combiner, `1/Σ_k 1/(σ²_{N_k}+τ_k)` —
    /// computed from the rate-side precision form, so it is bit-identical
    /// to the allocation's induced distortion.
    pub predicted_mse: f64,
}

impl TestChannelAllocation {
    /// Build the channels for dimension `p` of a rate allocation.
    pub fn from_rates(spec: &ProblemSpec, rates: &RateAllocation, p: usize) -> Result<Self> {
        let unit = rates.unit();
        let column = rates.column(p);
        let mut tau = Vec::with_capacity(column.len());
        let mut precision = Vec::with_capacity(column.len());
        for (k, &r) in column.iter().enumerate() {
            let s = spec.sigma_n_sq(k, p);
            if r == 0.0 {
                tau.push(f64::INFINITY);
                precision.push(0.0);
            } else {
                tau.push(test_channel_variance(s, r, unit)?);
                // Algebraically 1/(s + tau); the rate-side form keeps the
                // balance identity exact in floating point.
                precision.push((1.0 - unit.exp_neg2(r)) / s);
            }
        }
        let weights = weights_from_precisions(&precision)?;
        let total: f64 = precision.iter().sum();
        Ok(TestChannelAllocation {
            tau,
            weights,
            predicted_mse: 1.0 / total,
        })
    }

    /// Combiner output variance `Σ_k w_k² (σ²_{N_k} + τ_k)` — equals
    /// `predicted_mse` up to round-off; exposed for certification tests.
    pub fn combiner_variance(&self, sigma_n_sq: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(sigma_n_sq)
            .zip(&self.tau)
            .filter(|((&w, _), _)| w > 0.0)
            .map(|((&w, &s), &t)| w * w * (s + t))
            .sum()
    }
}

/// Monte Carlo verdict for one dimension.
#[derive(Clone, Debug, Serialize)]
pub struct SimReport {
    /// Dimension index the report covers.
    pub dimension: usize,
    /// Sample count.
    pub n: usize,
    /// Seed the run was keyed by.
    pub seed: u64,
    /// Mean squared estimator error over the samples.
    pub empirical_mse: f64,
    /// 95% normal-approximation halfwidth for `empirical_mse`.
    #[serde(rename = "ci")]
    pub mse_ci_halfwidth: f64,
    /// Slope of the regression of estimates on the true source (1 for an
    /// unbiased combiner).
    pub bias_slope: f64,
    /// Intercept of that regression (0 for an unbiased combiner).
    pub bias_intercept: f64,
    /// Standard error of `bias_slope`.
    pub slope_stderr: f64,
    /// Standard error of `bias_intercept`.
    pub intercept_stderr: f64,
    /// The distortion the rate allocation promises on this dimension.
    pub predicted_mse: f64,
}

/// Sequential statistics over index-ordered `(source, estimate)` pairs:
/// empirical MSE with CI, and the OLS regression of estimate on source.
fn report_from_pairs(
    dimension: usize,
    seed: u64,
    predicted_mse: f64,
    pairs: &[(f64, f64)],
) -> SimReport {
    let n = pairs.len();
    let nf = n as f64;
    let mut mse = 0.0;
    for &(g, ghat) in pairs {
        let e = ghat - g;
        mse += e * e;
    }
    mse /= nf;
    let mut sq_var = 0.0;
    for &(g, ghat) in pairs {
        let e = ghat - g;
        let d = e * e - mse;
        sq_var += d * d;
    }
    sq_var /= nf - 1.0;
    let ci = 1.96 * (sq_var / nf).sqrt();

    let g_mean = pairs.iter().map(|&(g, _)| g).sum::<f64>() / nf;
    let y_mean = pairs.iter().map(|&(_, y)| y).sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(g, y) in pairs {
        sxx += (g - g_mean) * (g - g_mean);
        sxy += (g - g_mean) * (y - y_mean);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * g_mean;
    let mut ssr = 0.0;
    for &(g, y) in pairs {
        let resid = y - (intercept + slope * g);
        ssr += resid * resid;
    }
    let resid_var = ssr / (nf - 2.0);
    let slope_stderr = (resid_var / sxx).sqrt();
    let intercept_stderr = (resid_var * (1.0 / nf + g_mean * g_mean / sxx)).sqrt();

    SimReport {
        dimension,
        n,
        seed,
        empirical_mse: mse,
        mse_ci_halfwidth: ci,
        bias_slope: slope,
        bias_intercept: intercept,
        slope_stderr,
        intercept_stderr,
        predicted_mse,
    }
}

fn validate_sim_args(spec: &ProblemSpec, rates: &RateAllocation, n: usize) -> Result<()> {
    if rates.grid().len() != spec.devices()
        || rates.grid().iter().any(|row| row.len() != spec.dims())
    {
        return Err(Error::InvalidInput(
            "rate allocation shape does not match the spec".into(),
        ));
    }
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientSamples {
            what: "Monte Carlo estimator verification",
            required: MIN_SAMPLES,
            got: n,
        });
    }
    Ok(())
}

/// Simulate the Gaussian test-channel pipeline for every dimension:
/// source draw, device observations, test-channel outputs, unbiased
/// combiner. Returns one report per dimension.
///
/// Devices with zero rate are silent: they receive weight exactly zero and
/// are never sampled, so the results match the instance with those devices
/// removed bit for bit.
pub fn simulate_ceo(
    spec: &ProblemSpec,
    rates: &RateAllocation,
    n: usize,
    seed: u64,
) -> Result<Vec<SimReport>> {
    validate_sim_args(spec, rates, n)?;
    let mut reports = Vec::with_capacity(spec.dims());
    for p in 0..spec.dims() {
        let channels = TestChannelAllocation::from_rates(spec, rates, p)?;
        let sigma_x = spec.sigma_x_sq(p).sqrt();
        let noise_std: Vec<f64> = (0..spec.devices())
            .map(|k| spec.sigma_n_sq(k, p).sqrt())
            .collect();
        let tau_std: Vec<f64> = channels
            .tau
            .iter()
            .map(|&t| if t.is_finite() { t.sqrt() } else { 0.0 })
            .collect();
        let active: Vec<usize> = (0..spec.devices())
            .filter(|&k| channels.weights[k] > 0.0)
            .collect();

        let pairs: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let pu = p as u64;
                let iu = i as u64;
                let g = sigma_x * normal_at(seed, &[site::CEO_SOURCE, pu, iu]);
                let mut ghat = 0.0;
                for &k in &active {
                    let ku = k as u64;
                    let obs =
                        g + noise_std[k] * normal_at(seed, &[site::CEO_OBS_NOISE, pu, ku, iu]);
                    let u = obs
                        + tau_std[k] * normal_at(seed, &[site::CEO_TEST_CHANNEL, pu, ku, iu]);
                    ghat += channels.weights[k] * u;
                }
                (g, ghat)
            })
            .collect();
        reports.push(report_from_pairs(p, seed, channels.predicted_mse, &pairs));
    }
    Ok(reports)
}

/// How quantizer steps are sized and guarded.
#[derive(Clone, Copy, Debug)]
pub struct StepPolicy {
    /// Multiplier on the matched step `√(12 τ_k)`; 1.0 matches the test
    /// channel's variance exactly.
    pub scale: f64,
    /// The step must not exceed `dynamic_range × 8 × std(G_k)`; a coarser
    /// quantizer is operating outside the signal's support.
    pub dynamic_range: f64,
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy {
            scale: 1.0,
            dynamic_range: 1.0,
        }
    }
}

/// Per-device operational-rate findings for the dithered quantizer.
#[derive(Clone, Debug, Serialize)]
pub struct DeviceQuantReport {
    /// Device index.
    pub device: usize,
    /// The rate the region charges this device, in bits.
    pub rate_bits: f64,
    /// Quantizer step `Δ` used.
    pub step: f64,
    /// Miller–Madow–corrected plug-in entropy of the quantizer indices,
    /// in bits.
    pub entropy_bits: f64,
    /// `entropy_bits − rate_bits`: the operational gap. Recorded, not
    /// asserted — without binning it grows when the shared source
    /// component dominates the device's observation.
    pub entropy_gap_bits: f64,
}

/// Report for one dimension of the dithered-quantizer pipeline.
#[derive(Clone, Debug, Serialize)]
pub struct DitherReport {
    /// The usual Monte Carlo verdict (MSE, CI, bias regression).
    #[serde(flatten)]
    pub sim: SimReport,
    /// Operational entropy accounting for each active device.
    pub per_device: Vec<DeviceQuantReport>,
}

/// Miller–Madow entropy estimate (in bits) from index counts.
fn entropy_bits(counts: &BTreeMap<i64, u64>, n: usize) -> f64 {
    let nf = n as f64;
    let mut h = 0.0;
    for &c in counts.values() {
        let p = c as f64 / nf;
        h -= p * p.log2();
    }
    h + (counts.len() as f64 - 1.0) / (2.0 * nf * LN_2)
}

/// Replace each Gaussian test channel with subtractive-dither uniform
/// quantization at matched variance (`Δ_k²/12 = τ_k`): quantize
/// `G_k + Z_k` to the nearest multiple of `Δ_k` (`Z_k` uniform on
/// `±Δ_k/2`), transmit the index, reconstruct `index·Δ_k − Z_k`. The
/// reconstruction error is uniform with variance exactly `τ_k` and
/// independent of the signal, so the combiner's MSE matches the Gaussian
/// pipeline's prediction while the index stream has a measurable entropy
/// rate.
pub fn simulate_dithered_quantizer(
    spec: &ProblemSpec,
    rates: &RateAllocation,
    policy: &StepPolicy,
    n: usize,
    seed: u64,
) -> Result<Vec<DitherReport>> {
    validate_sim_args(spec, rates, n)?;
    if !policy.scale.is_finite()
        || policy.scale <= 0.0
        || !policy.dynamic_range.is_finite()
        || policy.dynamic_range <= 0.0
    {
        return Err(Error::InvalidInput(format!(
            "step policy must have positive scale and dynamic range, got ({}, {})",
            policy.scale, policy.dynamic_range
        )));
    }
    let mut reports = Vec::with_capacity(spec.dims());
    for p in 0..spec.dims() {
        let channels = TestChannelAllocation::from_rates(spec, rates, p)?;
        let sigma_x = spec.sigma_x_sq(p).sqrt();
        let active: Vec<usize> = (0..spec.devices())
            .filter(|&k| channels.weights[k] > 0.0)
            .collect();

        let mut steps = vec![0.0; spec.devices()];
        for &k in &active {
            let step = policy.scale * (12.0 * channels.tau[k]).sqrt();
            let obs_std = (spec.sigma_x_sq(p) + spec.sigma_n_sq(k, p)).sqrt();
            let limit = policy.dynamic_range * 8.0 * obs_std;
            if step > limit {
                return Err(Error::StepOverflow {
                    device: k,
                    dimension: p,
                    step,
                    limit,
                });
            }
            steps[k] = step;
        }
        let noise_std: Vec<f64> = (0..spec.devices())
            .map(|k| spec.sigma_n_sq(k, p).sqrt())
            .collect();

        let rows: Vec<(f64, f64, Vec<i64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let pu = p as u64;
                let iu = i as u64;
                let g = sigma_x * normal_at(seed, &[site::CEO_SOURCE, pu, iu]);
                let mut ghat = 0.0;
                let mut indices = Vec::with_capacity(active.len());
                for &k in &active {
                    let ku = k as u64;
                    let obs =
                        g + noise_std[k] * normal_at(seed, &[site::CEO_OBS_NOISE, pu, ku, iu]);
                    let mut dither = Stream::keyed(seed, &[site::CEO_DITHER, pu, ku, iu]);
                    let z = dither.uniform_symmetric(steps[k] / 2.0);
                    let index = ((obs + z) / steps[k]).round() as i64;
                    let u = index as f64 * steps[k] - z;
                    ghat += channels.weights[k] * u;
                    indices.push(index);
                }
                (g, ghat, indices)
            })
            .collect();

        let pairs: Vec<(f64, f64)> = rows.iter().map(|&(g, y, _)| (g, y)).collect();
        let sim = report_from_pairs(p, seed, channels.predicted_mse, &pairs);

        let mut per_device = Vec::with_capacity(active.len());
        for (slot, &k) in active.iter().enumerate() {
            let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
            for row in &rows {
                *counts.entry(row.2[slot]).or_insert(0) += 1;
            }
            let rate_bits = rates.unit().convert(rates.rate(k, p), RateUnit::Bits);
            let h = entropy_bits(&counts, n);
            per_device.push(DeviceQuantReport {
                device: k,
                rate_bits,
                step: steps[k],
                entropy_bits: h,
                entropy_gap_bits: h - rate_bits,
            });
        }
        reports.push(DitherReport { sim, per_device });
    }
    Ok(reports)
}
