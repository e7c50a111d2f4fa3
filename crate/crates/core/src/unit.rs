//! Rate units.
//!
//! Every rate that crosses a public boundary carries a [`RateUnit`] tag.
//! The solvers do their arithmetic in the tagged unit's own logarithm
//! domain (`log2`/`exp2` for bits, `ln`/`exp` for nats) instead of
//! converting through a fixed internal unit. That keeps binary-friendly
//! instances exact: `0.5 * log2(8) == 1.5` holds bit-for-bit in IEEE754,
//! while `0.5 * ln(8) / ln(2)` does not.

use serde::{Deserialize, Serialize};

/// Natural logarithm of 2, the bits↔nats conversion factor.
pub const LN_2: f64 = std::f64::consts::LN_2;

/// Unit in which a rate value is expressed.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RateUnit {
    /// log base 2 (one bit per binary digit).
    #[default]
    Bits,
    /// log base e.
    Nats,
}

impl RateUnit {
    /// Logarithm in this unit's base.
    #[inline]
    pub fn log(self, x: f64) -> f64 {
        match self {
            RateUnit::Bits => x.log2(),
            RateUnit::Nats => x.ln(),
        }
    }

    /// Inverse of [`RateUnit::log`].
    #[inline]
    pub fn exp(self, x: f64) -> f64 {
        match self {
            RateUnit::Bits => x.exp2(),
            RateUnit::Nats => x.exp(),
        }
    }

    /// `exp(−2 r)` where `r` is a rate expressed in this unit. This is the
    /// quantity the distortion-precision balance is built from.
    #[inline]
    pub fn exp_neg2(self, r: f64) -> f64 {
        self.exp(-2.0 * r)
    }

    /// Convert a scalar rate expressed in this unit into `to`.
    #[inline]
    pub fn convert(self, value: f64, to: RateUnit) -> f64 {
        match (self, to) {
            (RateUnit::Bits, RateUnit::Nats) => value * LN_2,
            (RateUnit::Nats, RateUnit::Bits) => value / LN_2,
            _ => value,
        }
    }

    /// Lower-case label used in file formats and CLI flags.
    pub fn label(self) -> &'static str {
        match self {
            RateUnit::Bits => "bits",
            RateUnit::Nats => "nats",
        }
    }
}

impl std::fmt::Display for RateUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for RateUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bits" | "bit" => Ok(RateUnit::Bits),
            "nats" | "nat" => Ok(RateUnit::Nats),
            other => Err(format!("unknown rate unit {other:?} (expected bits|nats)")),
        }
    }
}
