//! `fedrate` — rate-region solvers, communication planning and Monte Carlo
//! verification for bandwidth-limited federated estimation.
//!
//! Exit codes: `0` success, `1` invalid input or configuration, `2`
//! numerically infeasible request (e.g. a distortion below its floor).
//! Failures print one machine-readable JSON line
//! `{"error": <code>, "message": <text>}` on stderr.

mod exec;
mod fsio;
mod manifest;

use clap::{Parser, Subcommand};
use exec::sibling_with_suffix;
use fedrate_core::fl_planner::DConvention;
use fedrate_core::fl_sim::ProblemKind;
use fedrate_core::{Error, ProblemSpec, RateUnit, Result};
use fsio::GridSpec;
use manifest::{CommandSpec, Manifest, Method, FORMAT_VERSION};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "fedrate",
    version,
    about = "Rate-region solvers, communication planning and Monte Carlo \
             verification for bandwidth-limited federated estimation",
    arg_required_else_help = true
)]
struct Cli {
    /// Seed for every randomized stage (default 1)
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Rate unit for results: bits or nats (default: the spec file's
    /// declared unit, else bits)
    #[arg(long, global = true, value_name = "UNIT")]
    unit: Option<String>,

    /// Primary output file. JSON results are printed and mirrored here;
    /// CSV results go here instead of stdout
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    #[arg(
        long,
        global = true,
        value_name = "PATH",
        help = "Manifest path (default: \"<out>.manifest.json\" next to --out, else \
                \"fedrate.manifest.json\"). For `rerun` this names the manifest to replay"
    )]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Minimum sum rate for a total distortion budget, with the
    /// distortion split and per-device rates that achieve it
    Sumrate {
        /// Problem file (TOML or JSON) with keys P, K, sigma_X_sq,
        /// sigma_N_sq and optionally unit
        #[arg(long, value_name = "FILE")]
        spec: PathBuf,
        /// Total distortion budget summed over dimensions
        #[arg(long = "d-total", value_name = "D")]
        d_total: f64,
        /// Solver: auto | closed-form | numeric
        #[arg(long, value_name = "NAME", default_value = "auto")]
        method: String,
    },
    /// Check whether a rate point lies in the achievable region for a
    /// distortion target, from a JSON certificate file
    RegionCheck {
        /// Problem file (TOML or JSON)
        #[arg(long, value_name = "FILE")]
        spec: PathBuf,
        #[arg(
            long,
            value_name = "FILE",
            help = "Certificate JSON: {\"R\": [per-device totals], \"r_kp\": [[rates]], \
                    optional \"R_kp\", \"D_p\", \"D_total\", \"unit\"}"
        )]
        certificate: PathBuf,
        /// Fail instead of searching when the certificate has no
        /// per-dimension rate split
        #[arg(long)]
        strict: bool,
    },
    /// Size the iteration count and per-iteration bits that reach a target
    /// suboptimality with the least total communication
    Plan {
        /// Target averaged suboptimality
        #[arg(long, value_name = "EPS")]
        epsilon: f64,
        /// Radius bound on the iterate domain
        #[arg(long = "A", value_name = "A")]
        a: f64,
        /// Smoothness constant of the objective
        #[arg(long = "L", value_name = "L")]
        l: f64,
        /// Number of devices
        #[arg(long = "K", value_name = "K")]
        devices: usize,
        /// Gradient dimension
        #[arg(long = "P", value_name = "P")]
        dims: usize,
        /// Constant per-dimension gradient variance (alternative to
        /// --schedule)
        #[arg(long = "sigma-x2", value_name = "VAR")]
        sigma_x_sq: Option<f64>,
        /// Constant per-device noise variance (alternative to --schedule)
        #[arg(long = "sigma-n2", value_name = "VAR")]
        sigma_n_sq: Option<f64>,
        /// How the distortion grid is read: per-dim | total
        #[arg(long = "d-convention", value_name = "CONV", default_value = "per-dim")]
        d_convention: String,
        /// Distortion grid lo:hi:n to optimize over
        #[arg(long = "d-grid", value_name = "LO:HI:N")]
        d_grid: String,
        /// Stepwise variance schedule CSV with header t,sigma_X_sq,sigma_N_sq
        #[arg(long, value_name = "FILE")]
        schedule: Option<PathBuf>,
        /// Also write the swept trade-off curve as CSV
        #[arg(long = "curve-out", value_name = "FILE")]
        curve_out: Option<PathBuf>,
    },
    /// Monte Carlo check of a sum-rate operating point: simulate the
    /// estimation pipeline at the solved rates and compare measured MSE
    /// and bias against the promise
    SimulateCeo {
        /// Problem file (TOML or JSON)
        #[arg(long, value_name = "FILE")]
        spec: PathBuf,
        /// Total distortion budget to solve and simulate at
        #[arg(long = "d-total", value_name = "D")]
        d_total: f64,
        /// Monte Carlo sample count
        #[arg(long, value_name = "N", default_value_t = 100_000)]
        n: usize,
        /// Replace Gaussian test channels with subtractive-dither uniform
        /// quantizers and report measured index entropies
        #[arg(long)]
        dithered: bool,
        /// Multiplier on the variance-matched quantizer step (with
        /// --dithered)
        #[arg(long = "dither-scale", value_name = "X", default_value_t = 1.0)]
        dither_scale: f64,
        /// Dynamic-range guard for quantizer steps (with --dithered)
        #[arg(long = "dynamic-range", value_name = "X", default_value_t = 1.0)]
        dynamic_range: f64,
        /// Also write one CSV row per dimension
        #[arg(long = "csv-out", value_name = "FILE")]
        csv_out: Option<PathBuf>,
    },
    /// Train a synthetic federated problem under a chosen gradient
    /// estimator and record the loss/bits trace
    SimulateFl {
        /// Objective family: quadratic | logistic
        #[arg(long, value_name = "KIND", default_value = "quadratic")]
        problem: String,
        /// Gradient dimension
        #[arg(long = "P", value_name = "P")]
        dims: usize,
        /// Condition number for the quadratic family (ignored by logistic)
        #[arg(long, value_name = "X", default_value_t = 10.0)]
        cond: f64,
        /// Number of devices
        #[arg(long = "K", value_name = "K")]
        devices: usize,
        /// Per-device minibatch size
        #[arg(long, value_name = "B", default_value_t = 1)]
        batch: usize,
        /// Per-sample gradient noise variance on every device
        #[arg(long = "sigma2", value_name = "VAR", default_value_t = 1.0)]
        sigma_sq: f64,
        #[arg(
            long,
            value_name = "NAME",
            help = "Gradient estimator: exact | mean | quantized:<D> | noise:<D> \
                    (budgets D are totals over the gradient vector)"
        )]
        estimator: String,
        /// Iteration count
        #[arg(long = "T", value_name = "T")]
        t: u64,
        /// Number of independent runs, seeded seed, seed+1, ...
        #[arg(long, value_name = "N", default_value_t = 1)]
        seeds: usize,
        /// Override the prescribed step size
        #[arg(long = "step-size", value_name = "ETA")]
        step_size: Option<f64>,
    },
    /// Sweep the sum-rate/distortion curve over a grid and emit CSV
    /// (columns D,sum_rate_bits,per_dim_json; rates always in bits)
    Tradeoff {
        /// Problem file (TOML or JSON)
        #[arg(long, value_name = "FILE")]
        spec: PathBuf,
        /// Distortion grid lo:hi:n
        #[arg(long = "d-grid", value_name = "LO:HI:N")]
        d_grid: String,
    },
    /// Replay a recorded run from its manifest (use the global --manifest
    /// flag to name it); unchanged inputs reproduce outputs byte for byte
    Rerun,
}

fn parse_unit(text: &str) -> Result<RateUnit> {
    text.parse::<RateUnit>().map_err(Error::InvalidInput)
}

/// The unit a spec file declares, used when --unit is not given.
fn spec_file_unit(path: &PathBuf) -> Result<RateUnit> {
    Ok(ProblemSpec::from_path(path)?.1)
}

/// Expand CLI arguments into a fully-resolved manifest.
fn resolve(cli: Cli) -> Result<Manifest> {
    let seed = cli.seed.unwrap_or(1);
    let explicit_unit = match &cli.unit {
        Some(text) => Some(parse_unit(text)?),
        None => None,
    };

    if let Command::Rerun = cli.command {
        let path = cli.manifest.ok_or_else(|| {
            Error::InvalidInput("rerun needs --manifest <file> naming the run to replay".into())
        })?;
        return Manifest::load(&path);
    }

    let (command, file_unit) = match cli.command {
        Command::Sumrate {
            spec,
            d_total,
            method,
        } => {
            let unit = spec_file_unit(&spec)?;
            (
                CommandSpec::Sumrate {
                    spec,
                    d_total,
                    method: Method::parse(&method)?,
                },
                Some(unit),
            )
        }
        Command::RegionCheck {
            spec,
            certificate,
            strict,
        } => {
            let unit = spec_file_unit(&spec)?;
            (
                CommandSpec::RegionCheck {
                    spec,
                    certificate,
                    strict,
                },
                Some(unit),
            )
        }
        Command::Plan {
            epsilon,
            a,
            l,
            devices,
            dims,
            sigma_x_sq,
            sigma_n_sq,
            d_convention,
            d_grid,
            schedule,
            curve_out,
        } => {
            if schedule.is_some() && (sigma_x_sq.is_some() || sigma_n_sq.is_some()) {
                return Err(Error::InvalidInput(
                    "give either --schedule or the constant --sigma-x2/--sigma-n2 pair, not both"
                        .into(),
                ));
            }
            if schedule.is_none() && (sigma_x_sq.is_none() || sigma_n_sq.is_none()) {
                return Err(Error::InvalidInput(
                    "constant schedules need both --sigma-x2 and --sigma-n2 (or use --schedule)"
                        .into(),
                ));
            }
            (
                CommandSpec::Plan {
                    epsilon,
                    a,
                    l,
                    devices,
                    dims,
                    sigma_x_sq,
                    sigma_n_sq,
                    schedule,
                    d_convention: d_convention.parse::<DConvention>()?,
                    d_grid: GridSpec::parse(&d_grid)?,
                    curve_out,
                },
                None,
            )
        }
        Command::SimulateCeo {
            spec,
            d_total,
            n,
            dithered,
            dither_scale,
            dynamic_range,
            csv_out,
        } => {
            let unit = spec_file_unit(&spec)?;
            (
                CommandSpec::SimulateCeo {
                    spec,
                    d_total,
                    n,
                    dithered,
                    dither_scale,
                    dynamic_range,
                    csv_out,
                },
                Some(unit),
            )
        }
        Command::SimulateFl {
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
        } => {
            exec::validate_estimator(&estimator)?;
            (
                CommandSpec::SimulateFl {
                    problem: problem.parse::<ProblemKind>()?,
                    dims,
                    cond,
                    devices,
                    batch,
                    sigma_sq,
                    estimator,
                    t,
                    seeds,
                    step_size,
                },
                None,
            )
        }
        Command::Tradeoff { spec, d_grid } => {
            let unit = spec_file_unit(&spec)?;
            (
                CommandSpec::Tradeoff {
                    spec,
                    d_grid: GridSpec::parse(&d_grid)?,
                },
                Some(unit),
            )
        }
        Command::Rerun => unreachable!("handled above"),
    };

    let unit = explicit_unit.or(file_unit).unwrap_or(RateUnit::Bits);
    let manifest_path = cli.manifest.unwrap_or_else(|| match &cli.out {
        Some(out) => sibling_with_suffix(out, ".manifest.json"),
        None => PathBuf::from("fedrate.manifest.json"),
    });
    Ok(Manifest {
        tool: "fedrate".into(),
        format_version: FORMAT_VERSION,
        seed,
        unit,
        out: cli.out,
        manifest: manifest_path,
        command,
    })
}

fn emit_error_json(code: &str, message: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "error": code, "message": message })
    );
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let rendered = e.to_string();
            let first = rendered
                .lines()
                .find(|line| !line.trim().is_empty())
                .unwrap_or("invalid command line")
                .trim();
            emit_error_json("InvalidInput", first);
            return 1;
        }
    };
    match resolve(cli).and_then(|m| exec::execute(&m)) {
        Ok(()) => 0,
        Err(err) => {
            emit_error_json(err.code(), &err.to_string());
            if err.is_infeasibility() {
                2
            } else {
                1
            }
        }
    }
}

fn main() {
    std::process::exit(run());
}
