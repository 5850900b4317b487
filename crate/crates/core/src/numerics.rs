//! 8-bit sign+magnitude arithmetic.
//!
//! Activations and weights are both stored as [`QVal`]: one sign bit and a
//! 7-bit magnitude. Products are accumulated at full width in [`Acc`] and
//! brought back to 8 bits by [`requantize`], a power-of-two right shift with
//! round-half-away-from-zero and optional ReLU.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest representable magnitude.
pub const MAX_MAG: u8 = 127;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("cannot quantize non-finite value {0}")]
    NonFinite(f64),
    #[error("quantization scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("invalid layer quantization: {0}")]
    BadLayerQuant(String),
}

/// Sign+magnitude 8-bit scalar. Zero is always positive.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "u8", into = "u8")]
pub struct QVal {
    neg: bool,
    mag: u8,
}

impl QVal {
    pub const ZERO: QVal = QVal { neg: false, mag: 0 };

    /// Builds a value, saturating the magnitude and canonicalising zero.
    pub fn new(negative: bool, magnitude: u32) -> Self {
        let mag = magnitude.min(MAX_MAG as u32) as u8;
        QVal {
            neg: negative && mag != 0,
            mag,
        }
    }

    /// Saturating conversion from a signed integer.
    pub fn from_i32(v: i32) -> Self {
        QVal::new(v < 0, v.unsigned_abs())
    }

    pub fn to_i32(self) -> i32 {
        if self.neg {
            -(self.mag as i32)
        } else {
            self.mag as i32
        }
    }

    pub fn is_negative(self) -> bool {
        self.neg
    }

    pub fn magnitude(self) -> u8 {
        self.mag
    }

    pub fn is_zero(self) -> bool {
        self.mag == 0
    }

    /// Storage byte: bit 7 is the sign, bits 6..0 the magnitude.
    pub fn to_byte(self) -> u8 {
        ((self.neg as u8) << 7) | self.mag
    }

    /// Decodes a storage byte. The pattern `0x80` (negative zero) decodes to
    /// canonical zero.
    pub fn from_byte(b: u8) -> Self {
        QVal::new(b & 0x80 != 0, (b & 0x7f) as u32)
    }

    /// Real value represented at the given scale.
    pub fn dequantize(self, scale: f64) -> f64 {
        self.to_i32() as f64 / scale
    }
}

impl From<u8> for QVal {
    fn from(b: u8) -> Self {
        QVal::from_byte(b)
    }
}

impl From<QVal> for u8 {
    fn from(q: QVal) -> u8 {
        q.to_byte()
    }
}

impl fmt::Debug for QVal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", if self.neg { '-' } else { '+' }, self.mag)
    }
}

impl fmt::Display for QVal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_i32())
    }
}

/// Signed-value order: -127 < ... < 0 < ... < +127.
impl Ord for QVal {
    fn cmp(&self, other: &Self) -> Ordering {
        self.to_i32().cmp(&other.to_i32())
    }
}

impl PartialOrd for QVal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Full-width output-stationary accumulator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Acc(pub i32);

impl Acc {
    pub fn add_product(&mut self, p: i32) {
        self.0 += p;
    }
}

/// Per-layer requantization parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub weight_scale: f64,
    pub act_shift: u32,
    pub apply_relu: bool,
}

impl LayerQuant {
    pub fn new(weight_scale: f64, act_shift: u32, apply_relu: bool) -> Result<Self, QuantError> {
        let q = LayerQuant {
            weight_scale,
            act_shift,
            apply_relu,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if !(self.weight_scale.is_finite() && self.weight_scale > 0.0) {
            return Err(QuantError::BadLayerQuant(format!(
                "weight_scale {} must be positive",
                self.weight_scale
            )));
        }
        if self.act_shift > 31 {
            return Err(QuantError::BadLayerQuant(format!(
                "act_shift {} exceeds 31",
                self.act_shift
            )));
        }
        Ok(())
    }
}

/// Rounds a real value half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds half away from zero.
    x.round()
}

/// Quantizes a real value at `scale`, saturating to magnitude 127.
pub fn quantize(x: f64, scale: f64) -> Result<QVal, QuantError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(QuantError::BadScale(scale));
    }
    if !x.is_finite() {
        return Err(QuantError::NonFinite(x));
    }
    let m = round_half_away(x.abs() * scale);
    let mag = if m >= MAX_MAG as f64 { MAX_MAG as u32 } else { m as u32 };
    Ok(QVal::new(x < 0.0, mag))
}

/// Signed product of two values, in [-16129, 16129].
#[inline]
pub fn mul(a: QVal, b: QVal) -> i32 {
    let p = a.mag as i32 * b.mag as i32;
    if a.neg != b.neg {
        -p
    } else {
        p
    }
}

/// Integer right shift by `shift` with round-half-away-from-zero.
pub fn shift_round(value: i64, shift: u32) -> i64 {
    if shift == 0 {
        return value;
    }
    let half = 1i64 << (shift - 1);
    let m = (value.unsigned_abs() as i64 + half) >> shift;
    if value < 0 {
        -m
    } else {
        m
    }
}

/// Rescales an accumulator back to 8 bits.
pub fn requantize(a: Acc, q: &LayerQuant) -> QVal {
    let mut v = shift_round(a.0 as i64, q.act_shift);
    if q.apply_relu {
        v = v.max(0);
    }
    QVal::new(v < 0, v.unsigned_abs().min(MAX_MAG as u64) as u32)
}
