//! Counter-based deterministic random streams.
//!
//! Every random draw in the crate is produced by a [`Stream`] keyed by
//! `(seed, site, indices…)` — e.g. `(seed, TEST_CHANNEL, dimension, device,
//! sample)`. Two properties follow:
//!
//! * **Order independence.** The value of a draw depends only on its key,
//!   never on how many draws happened before it, so samples can be
//!   evaluated in parallel (or re-evaluated) with bit-identical results.
//! * **Site separation.** Each call site owns a distinct [`site`] constant,
//!   so adding draws to one site never perturbs another.
//!
//! The generator is SplitMix64: the key components are folded into a state
//! word through the 64-bit finalizer, then outputs are taken from the usual
//! Weyl-sequence + finalizer construction. SplitMix64 passes BigCrush and
//! is more than adequate for Monte Carlo noise; nothing here is
//! cryptographic.

/// Golden-ratio Weyl increment used by SplitMix64.
const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a bijective avalanche mix of one 64-bit word.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draw-site tags. Each logical source of randomness in the crate gets its
/// own constant so streams never collide across call sites.
pub mod site {
    /// Source symbol `G` in the aggregation simulator.
    pub const CEO_SOURCE: u64 = 1;
    /// Observation noise `N_k` in the aggregation simulator.
    pub const CEO_OBS_NOISE: u64 = 2;
    /// Gaussian test-channel noise `V_k`.
    pub const CEO_TEST_CHANNEL: u64 = 3;
    /// Subtractive dither for the quantizer realization.
    pub const CEO_DITHER: u64 = 4;
    /// Device gradient noise in the training simulator.
    pub const FL_LOCAL_NOISE: u64 = 5;
    /// Synthetic estimator noise in the training simulator.
    pub const FL_SYNTH_NOISE: u64 = 6;
    /// Test-channel noise applied to gradients by the quantized estimator.
    pub const FL_TEST_CHANNEL: u64 = 7;
    /// Synthetic problem generation (spectra, rotations, data sets).
    pub const FL_PROBLEM: u64 = 8;
    /// Gradient statistics estimation draws.
    pub const FL_STATS: u64 = 9;
}

/// A deterministic random stream addressed by `(seed, key path)`.
///
/// Construction costs a handful of multiplies; streams are used either as
/// one-shot keyed draws (construct, pull one value) or as short sequential
/// generators within a key.
#[derive(Clone, Debug)]
pub struct Stream {
    state: u64,
}

impl Stream {
    /// Open the stream addressed by `seed` and a key path. The path length
    /// at a given site must be fixed (it is, per site constant), so paths
    /// never alias between sites.
    pub fn keyed(seed: u64, path: &[u64]) -> Self {
        let mut state = mix64(seed ^ GAMMA);
        for &component in path {
            state = mix64(state.wrapping_add(GAMMA) ^ mix64(component.wrapping_add(GAMMA)));
        }
        Stream { state }
    }

    /// Next raw 64-bit output.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in the half-open interval `(0, 1]`.
    ///
    /// 53 mantissa bits; the `+1` keeps 0 out of range so logarithms of the
    /// output are always finite.
    #[inline]
    pub fn uniform_01(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform draw in `[-half_width, half_width)`.
    #[inline]
    pub fn uniform_symmetric(&mut self, half_width: f64) -> f64 {
        let u = ((self.next_u64() >> 11) as f64) * (1.0 / 9_007_199_254_740_992.0);
        (2.0 * u - 1.0) * half_width
    }

    /// One standard normal draw (Box–Muller; consumes two outputs).
    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform_01();
        let u2 = self.uniform_01();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal draw with the given standard deviation.
    #[inline]
    pub fn normal(&mut self, std_dev: f64) -> f64 {
        self.standard_normal() * std_dev
    }
}

/// One-shot standard normal at a key. Convenience for per-sample draws.
#[inline]
pub fn normal_at(seed: u64, path: &[u64]) -> f64 {
    Stream::keyed(seed, path).standard_normal()
}
