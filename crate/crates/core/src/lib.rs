//! Rate–distortion tools for unbiased distributed gradient aggregation.
//!
//! A parameter server estimates a per-iteration gradient vector `G ∈ R^P`
//! from `K` devices that each observe `G` through additive Gaussian noise
//! (`G_k = G + N_k`, mini-batch noise) and must describe their observation
//! over a rate-limited link. The server is restricted to estimators that are
//! *unbiased* for every realization of `G` — the combiner must return `G`
//! exactly when the descriptions are noiseless — which changes the rate
//! region relative to the classic remote-source setting: distortion can
//! never be squeezed below the inverse total observation precision, no
//! matter how much rate is spent.
//!
//! The crate has four pillars:
//!
//! * [`rate_region`] — the achievable rate region for the unbiased
//!   estimator constraint: per-dimension water-filling of noise-quantization
//!   rates, subset (cut-set style) rate bounds, membership checks, the
//!   closed-form sum rate for identical devices and a numeric sum-rate
//!   solver for heterogeneous instances.
//! * [`ceo_sim`] — Monte Carlo verification that the test channels behind a
//!   rate allocation actually deliver the promised mean-squared error with
//!   an unbiased linear combiner, including a dithered-quantizer realization
//!   with an operational entropy-rate estimate.
//! * [`fl_planner`] — iteration counts and communication budgets for
//!   gradient-descent training driven by the convergence bound
//!   `A·sqrt(2D/T) + L·A²/T`, plus per-iteration bit costs and an operating
//!   point optimizer over the distortion grid.
//! * [`fl_sim`] — synthetic quadratic / logistic training problems with
//!   device noise models, estimator implementations (exact, sample mean,
//!   quantized, synthetic noise) and a trainer that records loss,
//!   suboptimality, realized estimator variance and bits charged per
//!   iteration.
//!
//! All randomness flows through [`rng`], a counter-based generator keyed by
//! `(seed, site, indices…)`, so simulations are bit-identical regardless of
//! evaluation order or thread count.
//!
//! Rates are always carried with an explicit [`RateUnit`] tag; internal
//! computations run in the unit's own logarithm domain so that
//! binary-friendly instances produce exact binary answers.

pub mod ceo_sim;
pub mod error;
pub mod fl_planner;
pub mod fl_sim;
pub mod problem;
pub mod rate_region;
pub mod rng;
pub mod unit;

pub use error::Error;
pub use problem::ProblemSpec;
pub use unit::RateUnit;

/// Crate-wide `Result` alias.
pub type Result<T> = std::result::Result<T, Error>;
