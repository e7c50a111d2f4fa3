//! Desk-scale federated training simulation.
//!
//! Synthetic convex problems (quadratics with controlled spectra, small
//! logistic-regression instances) are optimized by projected SGD driven by
//! gradient estimators at a prescribed distortion:
//!
//! * [`EstimatorConfig::Exact`] — the true gradient (sanity baseline);
//! * [`EstimatorConfig::ErrorFreeSampleMean`] — the batch-weighted mean of
//!   noisy device gradients, as if communication were free;
//! * [`EstimatorConfig::Quantized`] — the test-channel pipeline: each
//!   device's gradient is perturbed per its rate and the fusion center
//!   applies the unbiased combiner, so the estimator's variance equals the
//!   rate allocation's induced distortion;
//! * [`EstimatorConfig::SyntheticNoise`] — the exact gradient plus
//!   isotropic Gaussian noise of total variance `D`, the idealized
//!   distortion-`D` unbiased estimator. This mode isolates convergence
//!   claims from achievability claims.
//!
//! Each run yields a [`TrainingTrace`] whose per-iteration bits column is
//! recomputable from the trace alone: `bits(t)` is the planner's
//! per-iteration price evaluated at that iteration's recorded variance
//! statistics and the run's distortion. Baseline modes (exact gradients,
//! error-free means, `D = 0`) charge zero bits — they model uncoded
//! references, not operating points of the rate region.
//!
//! [`estimate_gradient_stats`] closes the loop on modeling assumptions:
//! it estimates the gradient second moments and device noise variances a
//! planner needs, and reports diagnostics (gradient autocorrelation in
//! time, cross-dimension correlation, excess kurtosis of device noise)
//! with pass/fail flags, so the Gaussian/independence idealisations are
//! checked on the data rather than assumed.

use crate::ceo_sim::TestChannelAllocation;
use crate::fl_planner::{bits_per_iteration, DConvention};
use crate::problem::ProblemSpec;
use crate::rate_region::RateAllocation;
use crate::rng::site::{FL_LOCAL_NOISE, FL_PROBLEM, FL_STATS, FL_SYNTH_NOISE, FL_TEST_CHANNEL};
use crate::rng::{normal_at, Stream};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Family of synthetic objective.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Quadratic,
    Logistic,
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quadratic" => Ok(ProblemKind::Quadratic),
            "logistic" => Ok(ProblemKind::Logistic),
            other => Err(Error::InvalidInput(format!(
                "unknown problem kind {other:?}; use \"quadratic\" or \"logistic\""
            ))),
        }
    }
}

enum ProblemData {
    Quadratic {
        h: DMatrix<f64>,
    },
    Logistic {
        x: DMatrix<f64>,
        y: DVector<f64>,
        ridge: f64,
    },
}

/// A synthetic training objective with known smoothness, optimum, and
/// domain radius.
pub struct SyntheticProblem {
    pub kind: ProblemKind,
    /// Model dimension `P`.
    pub dims: usize,
    /// The optimum (exact for quadratics; a converged reference solve for
    /// logistic instances).
    pub w_star: DVector<f64>,
    /// Smoothness constant `L` (top curvature eigenvalue; for logistic,
    /// the standard `λ_max(XᵀX)/(4n) + ridge` bound).
    pub l: f64,
    /// Domain radius: optimization is projected onto the ball of radius
    /// `a` around `w0`, which contains `w_star` by construction.
    pub a: f64,
    /// Optimal objective value.
    pub f_star: f64,
    /// Start iterate (the origin).
    pub w0: DVector<f64>,
    data: ProblemData,
}

fn logistic_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-z))` without overflow.
fn logistic_loss_term(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

impl SyntheticProblem {
    /// Objective value at `w`.
    pub fn loss(&self, w: &DVector<f64>) -> f64 {
        match &self.data {
            ProblemData::Quadratic { h } => {
                let d = w - &self.w_star;
                0.5 * d.dot(&(h * &d))
            }
            ProblemData::Logistic { x, y, ridge } => {
                let n = x.nrows() as f64;
                let margins = x * w;
                let mut total = 0.0;
                for i in 0..x.nrows() {
                    total += logistic_loss_term(y[i] * margins[i]);
                }
                total / n + 0.5 * ridge * w.dot(w)
            }
        }
    }

    /// Gradient of the objective at `w`.
    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        match &self.data {
            ProblemData::Quadratic { h } => h * (w - &self.w_star),
            ProblemData::Logistic { x, y, ridge } => {
                let n = x.nrows() as f64;
                let margins = x * w;
                let mut g = DVector::zeros(self.dims);
                for i in 0..x.nrows() {
                    // d/dw log(1+e^{-y xᵀw}) = -y σ(-y xᵀw) x.
                    let coeff = -y[i] * logistic_sigmoid(-y[i] * margins[i]) / n;
                    g.axpy(coeff, &x.row(i).transpose(), 1.0);
                }
                g + *ridge * w
            }
        }
    }

    /// `F(w) − F*`.
    pub fn suboptimality(&self, w: &DVector<f64>) -> f64 {
        self.loss(w) - self.f_star
    }

    /// The quadratic curvature matrix, when the problem is quadratic.
    pub fn curvature(&self) -> Option<&DMatrix<f64>> {
        match &self.data {
            ProblemData::Quadratic { h } => Some(h),
            ProblemData::Logistic { .. } => None,
        }
    }
}

/// Build a synthetic problem.
///
/// * `Quadratic`: `F(w) = ½(w−w*)ᵀH(w−w*)` with `H = Q·diag(λ)·Qᵀ`,
///   eigenvalues log-spaced over `[L/condition_number, L]` (`L = 1`), `Q`
///   drawn Haar-like from the QR of a seeded Gaussian matrix, and `w*` a
///   seeded unit vector, so `A = ‖w* − w0‖ = 1` exactly and `F* = 0`.
/// * `Logistic`: two Gaussian classes at `±μ` (200 points, balanced
///   labels) under an `ℓ₂`-regularized logistic loss (ridge `0.01`);
///   `L = λ_max(XᵀX)/(4n) + ridge`, and `w*`/`F*` come from a Newton
///   reference solve (gradient norm ≤ 1e−12). `condition_number` is
///   ignored — the data fix the spectrum.
pub fn make_problem(
    kind: ProblemKind,
    dims: usize,
    condition_number: f64,
    seed: u64,
) -> Result<SyntheticProblem> {
    if dims == 0 {
        return Err(Error::InvalidInput("need at least one dimension".into()));
    }
    if !condition_number.is_finite() || condition_number < 1.0 {
        return Err(Error::InvalidInput(format!(
            "condition number must be at least 1, got {condition_number}"
        )));
    }
    match kind {
        ProblemKind::Quadratic => make_quadratic(dims, condition_number, seed),
        ProblemKind::Logistic => make_logistic(dims, seed),
    }
}

fn make_quadratic(dims: usize, cond: f64, seed: u64) -> Result<SyntheticProblem> {
    let l = 1.0;
    let eigs: Vec<f64> = if dims == 1 {
        vec![l]
    } else {
        (0..dims)
            .map(|i| l * cond.powf(-((dims - 1 - i) as f64) / (dims - 1) as f64))
            .collect()
    };
    let mut basis_stream = Stream::keyed(seed, &[FL_PROBLEM, 0]);
    let gauss = DMatrix::from_fn(dims, dims, |_, _| basis_stream.standard_normal());
    let q = gauss.qr().q();
    let h = &q * DMatrix::from_diagonal(&DVector::from_vec(eigs)) * q.transpose();
    // Symmetrize away the last bits of asymmetry from the two products.
    let h = 0.5 * (&h + h.transpose());

    let mut opt_stream = Stream::keyed(seed, &[FL_PROBLEM, 1]);
    let mut w_star = DVector::from_fn(dims, |_, _| opt_stream.standard_normal());
    let norm = w_star.norm();
    if norm == 0.0 {
        w_star[0] = 1.0;
    } else {
        w_star /= norm;
    }

    Ok(SyntheticProblem {
        kind: ProblemKind::Quadratic,
        dims,
        a: w_star.norm(),
        w_star,
        l,
        f_star: 0.0,
        w0: DVector::zeros(dims),
        data: ProblemData::Quadratic { h },
    })
}

fn make_logistic(dims: usize, seed: u64) -> Result<SyntheticProblem> {
    const N: usize = 200;
    const RIDGE: f64 = 0.01;
    let mut stream = Stream::keyed(seed, &[FL_PROBLEM, 2]);
    let mu = 1.5 / (dims as f64).sqrt();
    let mut x = DMatrix::zeros(N, dims);
    let mut y = DVector::zeros(N);
    for i in 0..N {
        let label = if i % 2 == 0 { 1.0 } else { -1.0 };
        y[i] = label;
        for j in 0..dims {
            x[(i, j)] = label * mu + stream.standard_normal();
        }
    }
    let n = N as f64;
    let gram = x.transpose() * &x;
    let l = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v))
        / (4.0 * n)
        + RIDGE;

    let mut problem = SyntheticProblem {
        kind: ProblemKind::Logistic,
        dims,
        w_star: DVector::zeros(dims),
        l,
        a: 0.0,
        f_star: 0.0,
        w0: DVector::zeros(dims),
        data: ProblemData::Logistic { x, y, ridge: RIDGE },
    };

    // Newton reference solve; the ridge keeps the Hessian uniformly
    // positive definite.
    let mut w = DVector::zeros(dims);
    for _ in 0..200 {
        let g = problem.gradient(&w);
        if g.norm() <= 1e-12 {
            break;
        }
        let (xm, yv, ridge) = match &problem.data {
            ProblemData::Logistic { x, y, ridge } => (x, y, *ridge),
            ProblemData::Quadratic { .. } => unreachable!(),
        };
        let margins = xm * &w;
        let mut hess = DMatrix::from_diagonal_element(dims, dims, ridge);
        for i in 0..xm.nrows() {
            let s = logistic_sigmoid(yv[i] * margins[i]);
            let coeff = s * (1.0 - s) / n;
            let xi = xm.row(i).transpose();
            hess.syger(coeff, &xi, &xi, 1.0);
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::SolverFailure("logistic Newton Hessian not PD".into()))?
            .solve(&g);
        w -= step;
    }
    let g_final = problem.gradient(&w);
    if g_final.norm() > 1e-10 {
        return Err(Error::SolverFailure(format!(
            "logistic reference solve stalled at gradient norm {}",
            g_final.norm()
        )));
    }
    problem.f_star = problem.loss(&w);
    problem.a = w.norm().max(1e-9);
    problem.w_star = w;
    Ok(problem)
}

/// One edge device's gradient statistics.
#[derive(Clone, Debug)]
pub struct DeviceModel {
    /// Device id — also the RNG stream key, so it must be unique.
    pub k: usize,
    /// Mini-batch size `B_k`.
    pub batch_size: usize,
    /// Per-sample gradient noise variance `σ²`; the local gradient's
    /// per-coordinate variance is `σ²/B_k`.
    pub noise_variance_per_sample: f64,
    /// Fixed gradient bias (the non-IID mode). Convergence guarantees are
    /// not claimed when set; traces are labeled.
    pub bias: Option<DVector<f64>>,
}

impl DeviceModel {
    pub fn new(k: usize, batch_size: usize, noise_variance_per_sample: f64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidInput(format!(
                "device {k}: batch size must be at least 1"
            )));
        }
        if !noise_variance_per_sample.is_finite() || noise_variance_per_sample < 0.0 {
            return Err(Error::InvalidInput(format!(
                "device {k}: noise variance must be nonnegative, got {noise_variance_per_sample}"
            )));
        }
        Ok(DeviceModel {
            k,
            batch_size,
            noise_variance_per_sample,
            bias: None,
        })
    }

    pub fn with_bias(mut self, bias: DVector<f64>) -> Self {
        self.bias = Some(bias);
        self
    }

    /// Per-coordinate variance of this device's local gradient.
    pub fn local_variance(&self) -> f64 {
        self.noise_variance_per_sample / self.batch_size as f64
    }
}

/// `∇F(w)` plus this device's mini-batch noise at iteration `t`:
/// independent `N(bias_p, σ²/B_k)` per coordinate.
pub fn local_gradient(
    problem: &SyntheticProblem,
    device: &DeviceModel,
    w: &DVector<f64>,
    t: u64,
    seed: u64,
) -> DVector<f64> {
    let mut g = problem.gradient(w);
    let var = device.local_variance();
    if var > 0.0 {
        let std = var.sqrt();
        for p in 0..problem.dims {
            g[p] += std * normal_at(seed, &[FL_LOCAL_NOISE, t, device.k as u64, p as u64]);
        }
    }
    if let Some(bias) = &device.bias {
        g += bias;
    }
    g
}

/// Batch-weighted mean `Σ_k (B_k/B)·G_k` — the optimal fusion of the
/// local gradients themselves, with per-coordinate variance `σ²/B` for a
/// common per-sample variance.
pub fn sample_mean_estimator(
    local_gradients: &[DVector<f64>],
    batch_sizes: &[usize],
) -> Result<DVector<f64>> {
    if local_gradients.is_empty() || local_gradients.len() != batch_sizes.len() {
        return Err(Error::InvalidInput(format!(
            "need matching nonempty gradient/batch lists, got {} and {}",
            local_gradients.len(),
            batch_sizes.len()
        )));
    }
    let total: usize = batch_sizes.iter().sum();
    if batch_sizes.iter().any(|&b| b == 0) || total == 0 {
        return Err(Error::InvalidInput("batch sizes must be at least 1".into()));
    }
    let mut out = DVector::zeros(local_gradients[0].len());
    for (g, &b) in local_gradients.iter().zip(batch_sizes) {
        if g.len() != out.len() {
            return Err(Error::InvalidInput(
                "local gradients disagree on dimension".into(),
            ));
        }
        out.axpy(b as f64 / total as f64, g, 1.0);
    }
    Ok(out)
}

/// Rate-limited fusion: per dimension, each device's gradient passes
/// through its test channel (an additive perturbation of variance `τ_k,p`
/// set by its rate) and the center applies the unbiased combiner. The
/// estimator is conditionally unbiased given the true gradient, and its
/// per-dimension variance equals the allocation's induced distortion when
/// `spec`'s noise variances match the devices'.
pub fn quantized_estimator(
    local_gradients: &[DVector<f64>],
    spec: &ProblemSpec,
    rates: &RateAllocation,
    t: u64,
    seed: u64,
) -> Result<DVector<f64>> {
    let channels: Vec<TestChannelAllocation> = (0..spec.dims())
        .map(|p| TestChannelAllocation::from_rates(spec, rates, p))
        .collect::<Result<_>>()?;
    quantized_with_channels(local_gradients, &channels, t, seed)
}

fn quantized_with_channels(
    local_gradients: &[DVector<f64>],
    channels: &[TestChannelAllocation],
    t: u64,
    seed: u64,
) -> Result<DVector<f64>> {
    let k_n = local_gradients.len();
    if k_n != channels[0].weights.len() {
        return Err(Error::InvalidInput(format!(
            "got {k_n} local gradients for {} devices",
            channels[0].weights.len()
        )));
    }
    let dims = channels.len();
    let mut out = DVector::zeros(dims);
    for (p, chan) in channels.iter().enumerate() {
        let mut acc = 0.0;
        for k in 0..k_n {
            let w = chan.weights[k];
            // Silent devices (zero rate → infinite test-channel variance)
            // carry weight exactly zero and are never sampled.
            if w == 0.0 {
                continue;
            }
            let perturbed = local_gradients[k][p]
                + chan.tau[k].sqrt()
                    * normal_at(seed, &[FL_TEST_CHANNEL, t, k as u64, p as u64]);
            acc += w * perturbed;
        }
        out[p] = acc;
    }
    Ok(out)
}

/// Which gradient estimator drives a training run.
#[derive(Clone, Debug)]
pub enum EstimatorConfig {
    /// The true gradient — no devices, no noise, no bits.
    Exact,
    /// Batch-weighted mean of the device gradients; communication is not
    /// modeled (zero bits).
    ErrorFreeSampleMean,
    /// Test-channel pipeline at a fixed rate allocation; distortion is the
    /// allocation's total induced variance.
    Quantized {
        spec: ProblemSpec,
        rates: RateAllocation,
    },
    /// Exact gradient plus isotropic Gaussian noise of total variance `d`
    /// — the idealized distortion-`d` unbiased estimator.
    SyntheticNoise { d: f64 },
}

impl EstimatorConfig {
    /// Short label recorded in traces.
    pub fn label(&self) -> String {
        match self {
            EstimatorConfig::Exact => "exact".into(),
            EstimatorConfig::ErrorFreeSampleMean => "mean".into(),
            EstimatorConfig::Quantized { .. } => "quantized".into(),
            EstimatorConfig::SyntheticNoise { d } => format!("noise:{d}"),
        }
    }
}

/// Knobs with documented defaults; [`run_training`] uses
/// `RunOptions::default()`.
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Abort with [`Error::DivergenceDetected`] when the loss exceeds this
    /// multiple of the initial loss.
    pub divergence_factor: f64,
    /// Replace the prescribed step size `γ/(L+1)`, `γ = A√(2/(DT))` (or
    /// `1/(L+1)` at `D = 0`) with a fixed value.
    pub step_size_override: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            divergence_factor: 1e6,
            step_size_override: None,
        }
    }
}

/// One iteration's record: statistics are captured *before* the step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceRecord {
    /// Iteration index, 1-based.
    pub t: u64,
    /// `F(w(t))`.
    pub loss: f64,
    /// `F(w(t)) − F*`.
    pub subopt: f64,
    /// Realized squared estimator error `‖Ĝ(t) − ∇F(w(t))‖²` (one draw;
    /// average over iterations to estimate the variance).
    pub realized_var: f64,
    /// Bits charged for the iteration (see [`TrainingTrace::total_bits`]).
    pub bits: f64,
    /// Plug-in per-dimension gradient second moment `‖∇F(w(t))‖²/P`.
    pub sigma_x_sq: f64,
    /// Equivalent identical per-device noise variance at `t` (the value
    /// whose distortion floor matches the device mix).
    pub sigma_n_sq: f64,
}

/// Full record of a training run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
    /// `F(w̄) − F*` for the averaged iterate `w̄ = (1/T)Σ_t w(t)` — the
    /// quantity the convergence bound controls.
    pub averaged_subopt: f64,
    /// `F(w(T+1)) − F*` for the last iterate.
    pub final_subopt: f64,
    pub seed: u64,
    /// `Σ_t bits(t)`; each `bits(t)` equals the planner's per-iteration
    /// price at `(sigma_x_sq(t), sigma_n_sq(t), d)` under the total-`D`
    /// convention, `+∞` when `d` is below that iteration's floor, and `0`
    /// for baseline estimators (`d = 0`).
    pub total_bits: f64,
    /// Total estimator distortion the run was configured for.
    pub d: f64,
    /// Device count.
    pub devices: usize,
    /// Model dimension.
    pub dims: usize,
    /// Estimator label (`exact`, `mean`, `quantized`, `noise:D`).
    pub estimator: String,
    /// True when any device carries a bias (non-IID mode) — convergence
    /// guarantees are not claimed for such traces.
    pub biased: bool,
    /// Step size used.
    pub step_size: f64,
}

/// Equivalent identical per-device noise variance for a device mix: the
/// scalar `σ²_N` whose `K`-device distortion floor `σ²_N/K` matches
/// `(Σ_k B_k/σ²_k)⁻¹`. Zero when any device is noiseless.
fn equivalent_noise_variance(devices: &[DeviceModel]) -> f64 {
    if devices.is_empty() {
        return 0.0;
    }
    let mut inv_sum = 0.0;
    for d in devices {
        let v = d.local_variance();
        if v == 0.0 {
            return 0.0;
        }
        inv_sum += 1.0 / v;
    }
    devices.len() as f64 / inv_sum
}

/// Per-iteration bits at recorded statistics: the planner's price at
/// total distortion `d`, with variances floored at a tiny positive value
/// so exhausted gradients and noiseless devices price smoothly; `+∞` when
/// `d` sits below the iteration's distortion floor (no finite rate
/// achieves it).
fn bits_at(sigma_x_sq: f64, sigma_n_sq: f64, devices: usize, dims: usize, d: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    match bits_per_iteration(
        sigma_x_sq.max(TINY),
        sigma_n_sq.max(TINY),
        devices,
        dims,
        d,
        DConvention::Total,
    ) {
        Ok(bits) => Ok(bits),
        Err(Error::DistortionBelowFloor { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Run `t_iters` steps of projected SGD from `problem.w0` with the given
/// estimator, recording one [`TraceRecord`] per iteration (statistics
/// before the step). The step size follows the convergence analysis —
/// `η = γ/(L+1)`, `γ = A√(2/(DT))`, or `1/(L+1)` when `D = 0` — unless
/// overridden; iterates are projected back onto the ball of radius
/// `problem.a` around `w0` whenever a step leaves it.
pub fn run_training(
    problem: &SyntheticProblem,
    devices: &[DeviceModel],
    config: &EstimatorConfig,
    t_iters: u64,
    seed: u64,
) -> Result<TrainingTrace> {
    run_training_with(problem, devices, config, t_iters, seed, &RunOptions::default())
}

/// [`run_training`] with explicit [`RunOptions`].
pub fn run_training_with(
    problem: &SyntheticProblem,
    devices: &[DeviceModel],
    config: &EstimatorConfig,
    t_iters: u64,
    seed: u64,
    options: &RunOptions,
) -> Result<TrainingTrace> {
    if t_iters == 0 {
        return Err(Error::InvalidInput("iteration count must be at least 1".into()));
    }
    for d in devices {
        if let Some(b) = &d.bias {
            if b.len() != problem.dims {
                return Err(Error::InvalidInput(format!(
                    "device {} bias has length {}, problem has {} dimensions",
                    d.k,
                    b.len(),
                    problem.dims
                )));
            }
        }
    }

    // Resolve the estimator's machinery and its total distortion.
    let mut channels: Vec<TestChannelAllocation> = Vec::new();
    let d_run = match config {
        EstimatorConfig::Exact => 0.0,
        EstimatorConfig::ErrorFreeSampleMean => {
            if devices.is_empty() {
                return Err(Error::InvalidInput(
                    "sample-mean estimator needs at least one device".into(),
                ));
            }
            let total_batch: usize = devices.iter().map(|d| d.batch_size).sum();
            let mut var = 0.0;
            for d in devices {
                let share = d.batch_size as f64 / total_batch as f64;
                var += share * share * d.local_variance();
            }
            problem.dims as f64 * var
        }
        EstimatorConfig::Quantized { spec, rates } => {
            if spec.devices() != devices.len() {
                return Err(Error::InvalidInput(format!(
                    "rate spec has {} devices, run has {}",
                    spec.devices(),
                    devices.len()
                )));
            }
            if spec.dims() != problem.dims {
                return Err(Error::InvalidInput(format!(
                    "rate spec has {} dimensions, problem has {}",
                    spec.dims(),
                    problem.dims
                )));
            }
            channels = (0..spec.dims())
                .map(|p| TestChannelAllocation::from_rates(spec, rates, p))
                .collect::<Result<_>>()?;
            channels.iter().map(|c| c.predicted_mse).sum()
        }
        EstimatorConfig::SyntheticNoise { d } => {
            if !d.is_finite() || *d < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "synthetic noise variance must be nonnegative, got {d}"
                )));
            }
            *d
        }
    };

    let eta = options.step_size_override.unwrap_or_else(|| {
        if d_run == 0.0 {
            1.0 / (problem.l + 1.0)
        } else {
            problem.a * (2.0 / (d_run * t_iters as f64)).sqrt() / (problem.l + 1.0)
        }
    });

    let sigma_n_sq = equivalent_noise_variance(devices);
    let k_n = devices.len();
    let batch_sizes: Vec<usize> = devices.iter().map(|d| d.batch_size).collect();
    let initial_loss = problem.loss(&problem.w0);
    let per_dim_noise = (d_run / problem.dims as f64).sqrt();

    let mut w = problem.w0.clone();
    let mut w_sum = DVector::zeros(problem.dims);
    let mut records = Vec::with_capacity(t_iters as usize);
    let mut total_bits = 0.0;

    for t in 1..=t_iters {
        let loss = problem.loss(&w);
        if !loss.is_finite() || loss > options.divergence_factor * initial_loss.max(1e-300) {
            return Err(Error::DivergenceDetected {
                iteration: t,
                loss,
                factor: options.divergence_factor,
            });
        }
        w_sum += &w;
        let g = problem.gradient(&w);
        let sigma_x_sq = g.dot(&g) / problem.dims as f64;

        let estimate = match config {
            EstimatorConfig::Exact => g.clone(),
            EstimatorConfig::ErrorFreeSampleMean => {
                let locals: Vec<DVector<f64>> = devices
                    .iter()
                    .map(|dev| local_gradient(problem, dev, &w, t, seed))
                    .collect();
                sample_mean_estimator(&locals, &batch_sizes)?
            }
            EstimatorConfig::Quantized { .. } => {
                let locals: Vec<DVector<f64>> = devices
                    .iter()
                    .map(|dev| local_gradient(problem, dev, &w, t, seed))
                    .collect();
                quantized_with_channels(&locals, &channels, t, seed)?
            }
            EstimatorConfig::SyntheticNoise { .. } => {
                let mut e = g.clone();
                if d_run > 0.0 {
                    for p in 0..problem.dims {
                        e[p] += per_dim_noise * normal_at(seed, &[FL_SYNTH_NOISE, t, p as u64]);
                    }
                }
                e
            }
        };
        let err = &estimate - &g;
        let realized_var = err.dot(&err);

        // Baselines (d = 0, and the uncoded sample mean) charge no bits.
        let bits = match config {
            EstimatorConfig::Exact | EstimatorConfig::ErrorFreeSampleMean => 0.0,
            _ if d_run == 0.0 => 0.0,
            _ => bits_at(sigma_x_sq, sigma_n_sq, k_n.max(1), problem.dims, d_run)?,
        };
        total_bits += bits;
        records.push(TraceRecord {
            t,
            loss,
            subopt: loss - problem.f_star,
            realized_var,
            bits,
            sigma_x_sq,
            sigma_n_sq,
        });

        w.axpy(-eta, &estimate, 1.0);
        let offset = &w - &problem.w0;
        let dist = offset.norm();
        if dist > problem.a {
            w = &problem.w0 + offset * (problem.a / dist);
        }
    }

    let w_bar = w_sum / t_iters as f64;
    Ok(TrainingTrace {
        averaged_subopt: problem.suboptimality(&w_bar),
        final_subopt: problem.suboptimality(&w),
        records,
        seed,
        total_bits,
        d: d_run,
        devices: k_n,
        dims: problem.dims,
        estimator: config.label(),
        biased: devices.iter().any(|d| d.bias.is_some()),
        step_size: eta,
    })
}

/// Run independent seeds in parallel. Traces are bit-identical to
/// sequential runs regardless of thread count — each run touches only its
/// own keyed streams.
pub fn run_many(
    problem: &SyntheticProblem,
    devices: &[DeviceModel],
    config: &EstimatorConfig,
    t_iters: u64,
    seeds: &[u64],
) -> Result<Vec<TrainingTrace>> {
    seeds
        .par_iter()
        .map(|&s| run_training(problem, devices, config, t_iters, s))
        .collect()
}

/// Thresholds for the modeling-assumption diagnostics.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DiagnosticThresholds {
    /// Max tolerated |lag-1 autocorrelation| of the gradient sequence.
    pub autocorr: f64,
    /// Max tolerated |cross-dimension noise correlation|.
    pub cross_corr: f64,
    /// Max tolerated |excess kurtosis| of device noise.
    pub excess_kurtosis: f64,
}

impl Default for DiagnosticThresholds {
    fn default() -> Self {
        DiagnosticThresholds {
            autocorr: 0.2,
            cross_corr: 0.2,
            excess_kurtosis: 0.5,
        }
    }
}

/// One diagnostic's outcome.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DiagnosticCheck {
    /// The statistic (largest-magnitude value across dimensions/devices).
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn check(value: f64, threshold: f64) -> DiagnosticCheck {
    DiagnosticCheck {
        value,
        threshold,
        pass: value.abs() <= threshold,
    }
}

/// Estimated gradient statistics plus assumption diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct GradientStats {
    /// Pooled per-dimension gradient second moment over the schedule.
    pub sigma_x_sq: Vec<f64>,
    /// Per-schedule-point, per-device, per-dimension noise variance
    /// estimates (`[t][k][p]`).
    pub sigma_n_sq: Vec<Vec<Vec<f64>>>,
    /// Lag-1 autocorrelation of the gradient sequence (worst dimension).
    pub autocorr: DiagnosticCheck,
    /// Cross-dimension noise correlation (worst pair).
    pub cross_corr: DiagnosticCheck,
    /// Excess kurtosis of device noise (worst device/dimension).
    pub excess_kurtosis: DiagnosticCheck,
    /// Set when some device/dimension has zero noise variance — its
    /// kurtosis is undefined and skipped.
    pub degenerate_variance: bool,
}

impl GradientStats {
    pub fn all_pass(&self) -> bool {
        self.autocorr.pass && self.cross_corr.pass && self.excess_kurtosis.pass
    }
}

/// Estimate the statistics a planner needs — per-dimension gradient
/// second moments `σ̂²_X` and per-device noise variances `σ̂²_N` — from
/// `samples` independent local-gradient draws at each point of
/// `w_schedule`, and report whether the data support the modeling
/// idealisations (temporal independence, cross-dimension independence,
/// Gaussianity) at the default thresholds.
pub fn estimate_gradient_stats(
    problem: &SyntheticProblem,
    devices: &[DeviceModel],
    w_schedule: &[DVector<f64>],
    samples: usize,
    seed: u64,
) -> Result<GradientStats> {
    estimate_gradient_stats_with(
        problem,
        devices,
        w_schedule,
        samples,
        seed,
        &DiagnosticThresholds::default(),
    )
}

/// [`estimate_gradient_stats`] with explicit thresholds.
pub fn estimate_gradient_stats_with(
    problem: &SyntheticProblem,
    devices: &[DeviceModel],
    w_schedule: &[DVector<f64>],
    samples: usize,
    seed: u64,
    thresholds: &DiagnosticThresholds,
) -> Result<GradientStats> {
    if samples < 30 {
        return Err(Error::InsufficientSamples {
            what: "gradient statistics",
            required: 30,
            got: samples,
        });
    }
    if w_schedule.is_empty() {
        return Err(Error::InvalidInput("schedule of iterates is empty".into()));
    }
    if devices.is_empty() {
        return Err(Error::InvalidInput("need at least one device".into()));
    }
    let dims = problem.dims;
    let t_n = w_schedule.len();
    let k_n = devices.len();

    // True gradients along the schedule: second moments and lag-1
    // autocorrelation.
    let grads: Vec<DVector<f64>> = w_schedule.iter().map(|w| problem.gradient(w)).collect();
    let mut sigma_x_sq = vec![0.0; dims];
    for g in &grads {
        for p in 0..dims {
            sigma_x_sq[p] += g[p] * g[p];
        }
    }
    for v in &mut sigma_x_sq {
        *v /= t_n as f64;
    }
    let mut worst_auto = 0.0f64;
    if t_n >= 3 {
        for p in 0..dims {
            let mean: f64 = grads.iter().map(|g| g[p]).sum::<f64>() / t_n as f64;
            let denom: f64 = grads.iter().map(|g| (g[p] - mean).powi(2)).sum();
            if denom == 0.0 {
                continue;
            }
            let num: f64 = (0..t_n - 1)
                .map(|t| (grads[t][p] - mean) * (grads[t + 1][p] - mean))
                .sum();
            let rho = num / denom;
            if rho.abs() > worst_auto.abs() {
                worst_auto = rho;
            }
        }
    }

    // Noise draws: centered per (t, k) cell, then pooled for the
    // cross-dimension and kurtosis diagnostics.
    let mut sigma_n_sq = vec![vec![vec![0.0; dims]; k_n]; t_n];
    let mut pooled: Vec<Vec<f64>> = Vec::with_capacity(t_n * k_n * samples);
    // Per-(k, p) pooled central moments for kurtosis.
    let mut m2 = vec![vec![0.0; dims]; k_n];
    let mut m4 = vec![vec![0.0; dims]; k_n];
    let mut degenerate = false;

    for (ti, _w) in w_schedule.iter().enumerate() {
        for (ki, dev) in devices.iter().enumerate() {
            let std = dev.local_variance().sqrt();
            // Draw the noise directly; the true gradient is known and
            // adding it would cancel in the variance anyway.
            let mut draws = vec![vec![0.0; dims]; samples];
            for (rep, row) in draws.iter_mut().enumerate() {
                for (p, value) in row.iter_mut().enumerate() {
                    *value = std
                        * normal_at(
                            seed,
                            &[FL_STATS, ti as u64, dev.k as u64, rep as u64, p as u64],
                        );
                }
            }
            for p in 0..dims {
                let mean: f64 = draws.iter().map(|r| r[p]).sum::<f64>() / samples as f64;
                let ss: f64 = draws.iter().map(|r| (r[p] - mean).powi(2)).sum();
                sigma_n_sq[ti][ki][p] = ss / (samples - 1) as f64;
                for row in &mut draws {
                    row[p] -= mean;
                }
            }
            for row in &draws {
                for p in 0..dims {
                    let c = row[p];
                    m2[ki][p] += c * c;
                    m4[ki][p] += c * c * c * c;
                }
            }
            pooled.extend(draws);
        }
    }

    let pooled_n = pooled.len() as f64;
    let mut worst_cross = 0.0f64;
    if dims >= 2 {
        let mut var = vec![0.0; dims];
        for row in &pooled {
            for p in 0..dims {
                var[p] += row[p] * row[p];
            }
        }
        for (p, q) in (0..dims).flat_map(|p| (p + 1..dims).map(move |q| (p, q))) {
            if var[p] == 0.0 || var[q] == 0.0 {
                continue;
            }
            let cov: f64 = pooled.iter().map(|row| row[p] * row[q]).sum();
            let rho = cov / (var[p] * var[q]).sqrt();
            if rho.abs() > worst_cross.abs() {
                worst_cross = rho;
            }
        }
    }
    let _ = pooled_n;

    let mut worst_kurt = 0.0f64;
    let cell_n = (t_n * samples) as f64;
    for ki in 0..k_n {
        for p in 0..dims {
            let v2 = m2[ki][p] / cell_n;
            if v2 == 0.0 {
                degenerate = true;
                continue;
            }
            let v4 = m4[ki][p] / cell_n;
            let excess = v4 / (v2 * v2) - 3.0;
            if excess.abs() > worst_kurt.abs() {
                worst_kurt = excess;
            }
        }
    }

    Ok(GradientStats {
        sigma_x_sq,
        sigma_n_sq,
        autocorr: check(worst_auto, thresholds.autocorr),
        cross_corr: check(worst_cross, thresholds.cross_corr),
        excess_kurtosis: check(worst_kurt, thresholds.excess_kurtosis),
        degenerate_variance: degenerate,
    })
}
