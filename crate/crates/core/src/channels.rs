//! Width-multiplier channel arithmetic.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel counts are rounded to multiples of this divisor.
pub const DIVISOR: usize = 8;

/// Guard against float noise pushing an exact multiple over a boundary.
const ROUNDING_SLACK: f64 = 1e-9;

/// How a scaled channel count is snapped to a multiple of the divisor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    /// `max(d, round(v/d)·d)`, bumped up by `d` when that falls below `0.9·v`.
    Nearest,
    /// `max(d, ceil(v/d)·d)`.
    Ceil,
}

impl Rounding {
    pub fn apply(self, v: f64, divisor: usize) -> usize {
        match self {
            Rounding::Nearest => make_divisible(v, divisor),
            Rounding::Ceil => {
                let d = divisor as f64;
                let q = (v / d - ROUNDING_SLACK).ceil().max(1.0);
                q as usize * divisor
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Rounding::Nearest => "nearest",
            Rounding::Ceil => "ceil",
        }
    }
}

/// MobileNet rounding: nearest multiple of `divisor`, at least `divisor`,
/// and never more than 10% below `v`.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = ((v + d / 2.0) / d).floor().max(1.0) * d;
    if out < 0.9 * v {
        out += d;
    }
    out as usize
}

/// How a block's expanded width follows the multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expansion {
    /// `p` is scaled by α like every other width.
    Absolute,
    /// `p` keeps its ratio to the (already scaled) input width.
    InputRatio,
}

impl Expansion {
    pub fn name(self) -> &'static str {
        match self {
            Expansion::Absolute => "absolute",
            Expansion::InputRatio => "input-ratio",
        }
    }
}

/// The per-network convention for applying a width multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScalingRule {
    pub rounding: Rounding,
    pub expansion: Expansion,
}

impl ScalingRule {
    pub const CEIL_ABSOLUTE: ScalingRule = ScalingRule {
        rounding: Rounding::Ceil,
        expansion: Expansion::Absolute,
    };
    pub const NEAREST_ABSOLUTE: ScalingRule = ScalingRule {
        rounding: Rounding::Nearest,
        expansion: Expansion::Absolute,
    };
    pub const NEAREST_RATIO: ScalingRule = ScalingRule {
        rounding: Rounding::Nearest,
        expansion: Expansion::InputRatio,
    };

    pub fn round(self, v: f64) -> usize {
        self.rounding.apply(v, DIVISOR)
    }
}

impl fmt::Display for ScalingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.rounding.name(), self.expansion.name())
    }
}

impl FromStr for ScalingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut it = s.split_whitespace();
        let rounding = match it.next() {
            Some("nearest") => Rounding::Nearest,
            Some("ceil") => Rounding::Ceil,
            other => return Err(Error::Domain(format!("unknown rounding {other:?}"))),
        };
        let expansion = match it.next() {
            Some("absolute") => Expansion::Absolute,
            Some("input-ratio") => Expansion::InputRatio,
            other => return Err(Error::Domain(format!("unknown expansion rule {other:?}"))),
        };
        if let Some(extra) = it.next() {
            return Err(Error::Domain(format!(
                "unexpected token `{extra}` in scaling rule"
            )));
        }
        Ok(ScalingRule {
            rounding,
            expansion,
        })
    }
}

/// A raw width together with its scaled value under a multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledChannels {
    pub raw: usize,
    pub multiplier: f64,
    pub scaled: usize,
}

impl ScaledChannels {
    pub fn new(raw: usize, multiplier: f64, rounding: Rounding) -> Self {
        ScaledChannels {
            raw,
            multiplier,
            scaled: rounding.apply(raw as f64 * multiplier, DIVISOR),
        }
    }
}
