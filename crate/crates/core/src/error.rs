//! Error type shared by every module in the crate.
//!
//! Validation failures (bad shapes, non-positive variances, malformed
//! config) are distinct from numeric infeasibility (a requested distortion
//! below its floor, an unreachable target rate); the CLI maps the former to
//! exit code 1 and the latter to exit code 2.

/// Everything that can go wrong across the rate-region solvers, the
/// simulators and the planner.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A problem description failed validation (shape mismatch, empty
    /// dimension list, non-positive or non-finite variance, …).
    #[error("invalid problem description: {0}")]
    InvalidSpec(String),

    /// An operation argument failed validation.
    #[error("invalid argument: {0}")]
    InvalidInput(String),

    /// A rate was negative where only nonnegative rates are meaningful.
    #[error("rate for device {device} on dimension {dimension} is negative ({rate})")]
    NegativeRate {
        device: usize,
        dimension: usize,
        rate: f64,
    },

    /// Every device rate on a dimension is zero, so the induced distortion
    /// is infinite and dependent quantities are undefined.
    #[error("all rates on dimension {dimension} are zero; induced distortion is infinite")]
    AllRatesZero { dimension: usize },

    /// A per-dimension distortion target at or below the floor
    /// `(Σ_k 1/σ²_{N_k})⁻¹` that no finite rate can beat.
    #[error(
        "distortion target {d} on dimension {dimension} is at or below the floor {floor}; \
         no finite rate allocation reaches it"
    )]
    DistortionBelowFloor {
        dimension: usize,
        d: f64,
        floor: f64,
    },

    /// A distortion that must be strictly positive was not.
    #[error("distortion must be strictly positive, got {d}")]
    DistortionNonpositive { d: f64 },

    /// A total distortion budget at or below the sum of per-dimension
    /// floors.
    #[error(
        "total distortion {d_total} is at or below the sum of per-dimension floors {floor_sum}"
    )]
    InfeasibleTotalDistortion { d_total: f64, floor_sum: f64 },

    /// A rate allocation does not satisfy the distortion-precision balance
    /// `Σ_k (1 − e^{−2 r_k})/σ²_{N_k} = 1/D` on some dimension.
    #[error(
        "rate allocation is inconsistent with the distortion target on dimension {dimension}: \
         residual {residual:e} exceeds tolerance {tolerance:e}"
    )]
    InconsistentAllocation {
        dimension: usize,
        residual: f64,
        tolerance: f64,
    },

    /// Membership was asked to certify a point without a per-dimension rate
    /// decomposition while the feasibility search is disabled.
    #[error("no per-dimension rate decomposition supplied and the feasibility search is disabled")]
    CertificateMissing,

    /// Subset enumeration over 2^K − 1 sets was refused because K exceeds
    /// the configured cap.
    #[error("device count {k} exceeds the subset-enumeration cap {cap}; raise the cap explicitly to proceed")]
    SubsetCapExceeded { k: usize, cap: usize },

    /// A target sum rate beyond the solver's configured ceiling.
    #[error("target sum rate {target} exceeds the configured ceiling {ceiling}")]
    RateUnreachable { target: f64, ceiling: f64 },

    /// A bracketing or bisection step failed to converge. Carries enough
    /// context to reproduce the failing solve.
    #[error("numeric solver failed: {0}")]
    SolverFailure(String),

    /// Test-channel variance is undefined at zero rate (a silent device
    /// carries no description; combiners give it weight zero instead).
    #[error("test-channel variance is undefined at zero rate")]
    ZeroRate,

    /// A quantizer step exceeded the configured dynamic range.
    #[error(
        "quantizer step {step} for device {device} on dimension {dimension} exceeds the \
         dynamic-range limit {limit}"
    )]
    StepOverflow {
        device: usize,
        dimension: usize,
        step: f64,
        limit: f64,
    },

    /// Not enough samples (or schedule points) for the requested statistic.
    #[error("need at least {required} samples for {what}, got {got}")]
    InsufficientSamples {
        what: &'static str,
        required: usize,
        got: usize,
    },

    /// Training loss blew past the divergence guard.
    #[error(
        "training diverged at iteration {iteration}: loss {loss} exceeds {factor} x the initial loss"
    )]
    DivergenceDetected {
        iteration: u64,
        loss: f64,
        factor: f64,
    },

    /// Every distortion in a supplied grid was infeasible.
    #[error("no feasible distortion in the supplied grid")]
    EmptyFeasibleGrid,

    /// File I/O (config reads, artifact writes).
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Config file parsing (TOML or JSON).
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    /// True for errors that describe a numerically infeasible request (as
    /// opposed to malformed input). The CLI maps these to exit code 2.
    pub fn is_infeasibility(&self) -> bool {
        matches!(
            self,
            Error::DistortionBelowFloor { .. }
                | Error::InfeasibleTotalDistortion { .. }
                | Error::RateUnreachable { .. }
                | Error::EmptyFeasibleGrid
                | Error::AllRatesZero { .. }
        )
    }

    /// Stable machine-readable code for the error JSON emitted by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::InvalidInput(_) => "InvalidInput",
            Error::NegativeRate { .. } => "NegativeRate",
            Error::AllRatesZero { .. } => "AllRatesZero",
            Error::DistortionBelowFloor { .. } => "DistortionBelowFloor",
            Error::DistortionNonpositive { .. } => "DistortionNonpositive",
            Error::InfeasibleTotalDistortion { .. } => "InfeasibleTotalDistortion",
            Error::InconsistentAllocation { .. } => "InconsistentAllocation",
            Error::CertificateMissing => "CertificateMissing",
            Error::SubsetCapExceeded { .. } => "SubsetCapExceeded",
            Error::RateUnreachable { .. } => "RateUnreachable",
            Error::SolverFailure(_) => "SolverFailure",
            Error::ZeroRate => "ZeroRate",
            Error::StepOverflow { .. } => "StepOverflow",
            Error::InsufficientSamples { .. } => "InsufficientSamples",
            Error::DivergenceDetected { .. } => "DivergenceDetected",
            Error::EmptyFeasibleGrid => "EmptyFeasibleGrid",
            Error::Io { .. } => "Io",
            Error::Parse { .. } => "Parse",
        }
    }
}
