//! Executes a resolved manifest: writes the manifest next to the outputs,
//! runs the command, emits its artifacts.
//!
//! Output conventions:
//! - single results are JSON, printed to stdout and mirrored to `--out`;
//! - sweeps are CSV, written to `--out` when given and to stdout otherwise;
//! - every file write is atomic (temp file + rename);
//! - progress and convention notes go to stderr so stdout stays parseable.

use crate::fsio::{self, GridSpec};
use crate::manifest::{CommandSpec, Manifest, Method};
use fedrate_core::ceo_sim::{simulate_ceo, simulate_dithered_quantizer, SimReport, StepPolicy};
use fedrate_core::fl_planner::{
    optimize_operating_point, ConvexProblemParams, DConvention, VarianceSchedule,
};
use fedrate_core::fl_sim::{
    make_problem, run_many, run_training_with, DeviceModel, EstimatorConfig, ProblemKind,
    RunOptions, TrainingTrace,
};
use fedrate_core::rate_region::{
    check_membership, sum_rate_closed_form_result, sum_rate_numeric, tradeoff_curve,
    waterfill_noise_rates, DistortionAllocation, MembershipOptions, NumericOptions,
    RateAllocation, RatePoint, SumRateResult,
};
use fedrate_core::{Error, ProblemSpec, RateUnit, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Run a resolved command end to end.
pub fn execute(m: &Manifest) -> Result<()> {
    fsio::atomic_write(&m.manifest, m.to_json().as_bytes())?;
    match &m.command {
        CommandSpec::Sumrate {
            spec,
            d_total,
            method,
        } => exec_sumrate(m, spec, *d_total, *method),
        CommandSpec::RegionCheck {
            spec,
            certificate,
            strict,
        } => exec_region_check(m, spec, certificate, *strict),
        CommandSpec::Plan {
            epsilon,
            a,
            l,
            devices,
            dims,
            sigma_x_sq,
            sigma_n_sq,
            schedule,
            d_convention,
            d_grid,
            curve_out,
        } => exec_plan(
            m,
            *epsilon,
            *a,
            *l,
            *devices,
            *dims,
            *sigma_x_sq,
            *sigma_n_sq,
            schedule.as_deref(),
            *d_convention,
            *d_grid,
            curve_out.as_deref(),
        ),
        CommandSpec::SimulateCeo {
            spec,
            d_total,
            n,
            dithered,
            dither_scale,
            dynamic_range,
            csv_out,
        } => exec_simulate_ceo(
            m,
            spec,
            *d_total,
            *n,
            *dithered,
            *dither_scale,
            *dynamic_range,
            csv_out.as_deref(),
        ),
        CommandSpec::SimulateFl {
            problem,
            dims,
            cond,
            devices,
            batch,
            sigma_sq,
            estimator,
            t,
            seeds,
            step_size,
        } => exec_simulate_fl(
            m, *problem, *dims, *cond, *devices, *batch, *sigma_sq, estimator, *t, *seeds,
            *step_size,
        ),
        CommandSpec::Tradeoff { spec, d_grid } => exec_tradeoff(m, spec, *d_grid),
    }
}

/// Print a JSON value to stdout and mirror it to `out` when given.
fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("result serialization failed: {e}")))?;
    text.push('\n');
    print!("{text}");
    if let Some(path) = out {
        fsio::atomic_write(path, text.as_bytes())?;
    }
    Ok(())
}

/// Write CSV bytes to `out` when given, to stdout otherwise.
fn emit_csv(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fsio::atomic_write(path, bytes),
        None => {
            print!("{}", String::from_utf8_lossy(bytes));
            Ok(())
        }
    }
}

/// Finish a csv writer into its byte buffer.
fn csv_bytes(writer: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    writer
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv serialization failed: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv serialization failed: {e}"))
}

/// Shortest round-trip decimal for a float (what `Display` prints).
fn num(v: f64) -> String {
    format!("{v}")
}

/// Route a sum-rate request to the right solver.
fn solve_sum_rate(
    spec: &ProblemSpec,
    d_total: f64,
    unit: RateUnit,
    method: Method,
) -> Result<SumRateResult> {
    match method {
        Method::Auto => {
            if spec.is_identical() {
                sum_rate_closed_form_result(spec, d_total, unit)
            } else {
                sum_rate_numeric(spec, d_total, unit, &NumericOptions::default())
            }
        }
        Method::ClosedForm => sum_rate_closed_form_result(spec, d_total, unit),
        Method::Numeric => sum_rate_numeric(spec, d_total, unit, &NumericOptions::default()),
    }
}

fn exec_sumrate(m: &Manifest, spec_path: &Path, d_total: f64, method: Method) -> Result<()> {
    let (spec, _) = ProblemSpec::from_path(spec_path)?;
    let result = solve_sum_rate(&spec, d_total, m.unit, method)?;
    emit_json(m.out.as_deref(), &result)
}

/// On-disk certificate for `region-check`: the rate point to test and the
/// operating point it claims to achieve.
///
/// `R` is the per-device total rate (required). `R_kp` optionally splits
/// it per dimension (rows = devices); without it the checker searches for
/// a feasible split. `r_kp` is the noise-quantization rate grid behind the
/// distortion target (required, rows = devices). The distortion may be
/// given per dimension (`D_p`), as a total (`D_total`, split equally), or
/// omitted entirely, in which case it is taken to be what `r_kp` induces.
/// `unit` defaults to the run's unit.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateFile {
    unit: Option<String>,
    #[serde(rename = "R")]
    totals: Vec<f64>,
    #[serde(rename = "R_kp")]
    decomposition: Option<Vec<Vec<f64>>>,
    #[serde(rename = "D_p")]
    d_p: Option<Vec<f64>>,
    #[serde(rename = "D_total")]
    d_total: Option<f64>,
    #[serde(rename = "r_kp")]
    rates: Vec<Vec<f64>>,
}

fn exec_region_check(
    m: &Manifest,
    spec_path: &Path,
    certificate: &Path,
    strict: bool,
) -> Result<()> {
    let (spec, _) = ProblemSpec::from_path(spec_path)?;
    let text = fsio::read_to_string(certificate)?;
    let cert: CertificateFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: certificate.display().to_string(),
        message: e.to_string(),
    })?;
    let unit = match &cert.unit {
        Some(label) => label
            .parse::<RateUnit>()
            .map_err(Error::InvalidInput)?,
        None => m.unit,
    };
    let rates = RateAllocation::new(&spec, cert.rates, unit)?;
    let allocation = match (cert.d_p, cert.d_total) {
        (Some(per_dim), Some(total)) => DistortionAllocation::new(&spec, per_dim, total)?,
        (Some(per_dim), None) => {
            let total = per_dim.iter().sum();
            DistortionAllocation::new(&spec, per_dim, total)?
        }
        (None, Some(total)) => DistortionAllocation::equal_split(&spec, total)?,
        (None, None) => {
            let per_dim: Vec<f64> = (0..spec.dims()).map(|p| rates.induced_d(p)).collect();
            let total = per_dim.iter().sum();
            DistortionAllocation::new(&spec, per_dim, total)?
        }
    };
    let point = match cert.decomposition {
        Some(split) => RatePoint::with_decomposition(cert.totals, split, unit)?,
        None => RatePoint::totals_only(cert.totals, unit)?,
    };
    let opts = MembershipOptions {
        search_decomposition: !strict,
        collect_all_violations: true,
        ..MembershipOptions::default()
    };
    let report = check_membership(&spec, &point, &allocation, &rates, &opts)?;
    emit_json(m.out.as_deref(), &report)
}

#[allow(clippy::too_many_arguments)]
fn exec_plan(
    m: &Manifest,
    epsilon: f64,
    a: f64,
    l: f64,
    devices: usize,
    dims: usize,
    sigma_x_sq: Option<f64>,
    sigma_n_sq: Option<f64>,
    schedule: Option<&Path>,
    d_convention: DConvention,
    d_grid: GridSpec,
    curve_out: Option<&Path>,
) -> Result<()> {
    let params = ConvexProblemParams::new(a, l, epsilon)?;
    let sched = match schedule {
        Some(path) => fsio::load_schedule(path)?,
        None => {
            let sx = sigma_x_sq.ok_or_else(|| {
                Error::InvalidInput("constant schedules need --sigma-x2 (or use --schedule)".into())
            })?;
            let sn = sigma_n_sq.ok_or_else(|| {
                Error::InvalidInput("constant schedules need --sigma-n2 (or use --schedule)".into())
            })?;
            VarianceSchedule::constant(sx, sn)?
        }
    };
    eprintln!("d-convention: {d_convention}");
    let grid = d_grid.points();
    let (plan, curve) = optimize_operating_point(&params, &sched, devices, dims, &grid, d_convention)?;
    emit_json(m.out.as_deref(), &plan)?;
    if let Some(path) = curve_out {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["D", "T", "bits_per_iter", "total_bits"])
            .map_err(csv_err)?;
        for pt in &curve {
            w.write_record([num(pt.d), pt.t.to_string(), num(pt.bits_per_iter), num(pt.total_bits)])
                .map_err(csv_err)?;
        }
        fsio::atomic_write(path, &csv_bytes(w)?)?;
    }
    Ok(())
}

/// One CSV row per dimension with the Monte Carlo verdict.
fn sim_report_csv(reports: &[&SimReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dimension",
        "n",
        "seed",
        "empirical_mse",
        "ci",
        "bias_slope",
        "bias_intercept",
        "predicted_mse",
    ])
    .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.dimension.to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            num(r.empirical_mse),
            num(r.mse_ci_halfwidth),
            num(r.bias_slope),
            num(r.bias_intercept),
            num(r.predicted_mse),
        ])
        .map_err(csv_err)?;
    }
    csv_bytes(w)
}

#[allow(clippy::too_many_arguments)]
fn exec_simulate_ceo(
    m: &Manifest,
    spec_path: &Path,
    d_total: f64,
    n: usize,
    dithered: bool,
    dither_scale: f64,
    dynamic_range: f64,
    csv_out: Option<&Path>,
) -> Result<()> {
    let (spec, _) = ProblemSpec::from_path(spec_path)?;
    let solution = solve_sum_rate(&spec, d_total, m.unit, Method::Auto)?;
    if dithered {
        let policy = StepPolicy {
            scale: dither_scale,
            dynamic_range,
        };
        let reports = simulate_dithered_quantizer(&spec, &solution.rates, &policy, n, m.seed)?;
        emit_json(m.out.as_deref(), &reports)?;
        if let Some(path) = csv_out {
            let sims: Vec<&SimReport> = reports.iter().map(|r| &r.sim).collect();
            fsio::atomic_write(path, &sim_report_csv(&sims)?)?;
        }
    } else {
        let reports = simulate_ceo(&spec, &solution.rates, n, m.seed)?;
        emit_json(m.out.as_deref(), &reports)?;
        if let Some(path) = csv_out {
            let sims: Vec<&SimReport> = reports.iter().collect();
            fsio::atomic_write(path, &sim_report_csv(&sims)?)?;
        }
    }
    Ok(())
}

/// Turn an `--estimator` argument into a gradient-estimator configuration.
///
/// `quantized:D` prices and injects real test-channel noise: it builds an
/// identical instance over the run's device fleet (unit source variance
/// per dimension, per-device noise variance `sigma_sq / batch`), splits the
/// total budget `D` equally across dimensions and water-fills each one.
fn build_estimator(
    raw: &str,
    dims: usize,
    devices: usize,
    batch: usize,
    sigma_sq: f64,
) -> Result<EstimatorConfig> {
    let lower = raw.to_ascii_lowercase();
    if lower == "exact" {
        return Ok(EstimatorConfig::Exact);
    }
    if lower == "mean" {
        return Ok(EstimatorConfig::ErrorFreeSampleMean);
    }
    if let Some(d_text) = lower.strip_prefix("noise:") {
        let d: f64 = d_text
            .parse()
            .map_err(|_| Error::InvalidInput(format!("noise budget {d_text:?} is not a number")))?;
        return Ok(EstimatorConfig::SyntheticNoise { d });
    }
    if let Some(d_text) = lower.strip_prefix("quantized:") {
        let d: f64 = d_text.parse().map_err(|_| {
            Error::InvalidInput(format!("distortion budget {d_text:?} is not a number"))
        })?;
        if !d.is_finite() || d <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "distortion budget must be positive and finite, got {d}"
            )));
        }
        if batch == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        let local_var = sigma_sq / batch as f64;
        let spec = ProblemSpec::identical(dims, devices, 1.0, local_var)?;
        let per_dim_d = d / dims as f64;
        let fill = waterfill_noise_rates(&spec, 0, per_dim_d, RateUnit::Bits)?;
        let columns = vec![fill.rates.clone(); dims];
        let rates = RateAllocation::from_columns(&spec, columns, RateUnit::Bits)?;
        return Ok(EstimatorConfig::Quantized { spec, rates });
    }
    Err(Error::InvalidInput(format!(
        "unknown estimator {raw:?}; use exact, mean, quantized:<D> or noise:<D>"
    )))
}

/// Validate an `--estimator` argument without building it (used while
/// resolving flags, before the fleet shape is known to be sound).
pub fn validate_estimator(raw: &str) -> Result<()> {
    let lower = raw.to_ascii_lowercase();
    if lower == "exact" || lower == "mean" {
        return Ok(());
    }
    for prefix in ["noise:", "quantized:"] {
        if let Some(d_text) = lower.strip_prefix(prefix) {
            return d_text
                .parse::<f64>()
                .map(|_| ())
                .map_err(|_| Error::InvalidInput(format!("budget {d_text:?} is not a number")));
        }
    }
    Err(Error::InvalidInput(format!(
        "unknown estimator {raw:?}; use exact, mean, quantized:<D> or noise:<D>"
    )))
}

fn trace_csv(trace: &TrainingTrace) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "loss", "subopt", "realized_var", "bits"])
        .map_err(csv_err)?;
    for rec in &trace.records {
        w.write_record([
            rec.t.to_string(),
            num(rec.loss),
            num(rec.subopt),
            num(rec.realized_var),
            num(rec.bits),
        ])
        .map_err(csv_err)?;
    }
    csv_bytes(w)
}

#[allow(clippy::too_many_arguments)]
fn exec_simulate_fl(
    m: &Manifest,
    kind: ProblemKind,
    dims: usize,
    cond: f64,
    devices: usize,
    batch: usize,
    sigma_sq: f64,
    estimator: &str,
    t: u64,
    seeds: usize,
    step_size: Option<f64>,
) -> Result<()> {
    if seeds == 0 {
        return Err(Error::InvalidInput("--seeds must be at least 1".into()));
    }
    let problem = make_problem(kind, dims, cond, m.seed)?;
    let fleet: Vec<DeviceModel> = (0..devices)
        .map(|k| DeviceModel::new(k, batch, sigma_sq))
        .collect::<Result<_>>()?;
    let config = build_estimator(estimator, dims, devices, batch, sigma_sq)?;
    // Estimator budgets (quantized:D, noise:D) are totals over the gradient
    // vector; say so the same way `plan` announces its convention.
    eprintln!("d-convention: total_D");
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| m.seed.wrapping_add(i)).collect();
    let traces = match step_size {
        Some(step) => {
            let options = RunOptions {
                step_size_override: Some(step),
                ..RunOptions::default()
            };
            seed_list
                .iter()
                .map(|&s| run_training_with(&problem, &fleet, &config, t, s, &options))
                .collect::<Result<Vec<_>>>()?
        }
        None => run_many(&problem, &fleet, &config, t, &seed_list)?,
    };
    if let Some(path) = &m.out {
        fsio::atomic_write(path, &trace_csv(&traces[0])?)?;
    }
    let mean = |f: fn(&TrainingTrace) -> f64| -> f64 {
        traces.iter().map(f).sum::<f64>() / traces.len() as f64
    };
    let summary = serde_json::json!({
        "problem": kind,
        "dims": dims,
        "devices": devices,
        "batch": batch,
        "sigma_sq": sigma_sq,
        "estimator": traces[0].estimator,
        "t": t,
        "step_size": traces[0].step_size,
        "d": traces[0].d,
        "d_convention": "total_D",
        "mean_averaged_subopt": mean(|tr| tr.averaged_subopt),
        "mean_final_subopt": mean(|tr| tr.final_subopt),
        "runs": traces.iter().map(|tr| serde_json::json!({
            "seed": tr.seed,
            "averaged_subopt": tr.averaged_subopt,
            "final_subopt": tr.final_subopt,
            "total_bits": tr.total_bits,
        })).collect::<Vec<_>>(),
        "trace_out": m.out.as_ref().map(|p| p.display().to_string()),
    });
    let mut text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::InvalidInput(format!("result serialization failed: {e}")))?;
    text.push('\n');
    print!("{text}");
    Ok(())
}

fn exec_tradeoff(m: &Manifest, spec_path: &Path, d_grid: GridSpec) -> Result<()> {
    let (spec, _) = ProblemSpec::from_path(spec_path)?;
    let grid = d_grid.points();
    let curve = tradeoff_curve(&spec, &grid, RateUnit::Bits, &NumericOptions::default());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["D", "sum_rate_bits", "per_dim_json"])
        .map_err(csv_err)?;
    let mut rows = 0usize;
    for (d, solved) in curve {
        match solved {
            Ok(result) => {
                let per_dim = serde_json::to_string(&result.per_dim_rate)
                    .map_err(|e| Error::InvalidInput(format!("result serialization failed: {e}")))?;
                w.write_record([num(d), num(result.sum_rate), per_dim])
                    .map_err(csv_err)?;
                rows += 1;
            }
            Err(e) if e.is_infeasibility() => {
                eprintln!("skipping infeasible D={d}: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    if rows == 0 {
        return Err(Error::EmptyFeasibleGrid);
    }
    emit_csv(m.out.as_deref(), &csv_bytes(w)?)
}

/// Append a suffix to a path, for default locations like
/// `<out>.manifest.json`.
pub fn sibling_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", path.display()))
}
