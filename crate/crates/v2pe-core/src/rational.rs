//! Exact dyadic rationals (`mantissa / 2^k`).
//!
//! Position increments are dyadic by construction, so every delta and every
//! accumulated position index is exactly representable in binary floating
//! point. Keeping the arithmetic in this form makes position derivations
//! bit-reproducible; values are converted to `f64` only at the edge.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Largest numerator magnitude that converts to `f64` without rounding.
const EXACT_F64_LIMIT: i64 = 1 << 53;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DyadicError {
    #[error("`{0}` is not a valid rational (expected `n` or `n/d`)")]
    Malformed(String),
    #[error("denominator {0} is not a power of two")]
    NonDyadicDenominator(u64),
    #[error("denominator must be positive")]
    ZeroDenominator,
    #[error("dyadic arithmetic overflowed")]
    Overflow,
}

/// An exact rational whose denominator is a power of two.
///
/// Stored normalized: the numerator is odd unless the value is zero (in
/// which case `log2_den == 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dyadic {
    num: i64,
    log2_den: u32,
}

impl Dyadic {
    pub const ZERO: Dyadic = Dyadic { num: 0, log2_den: 0 };
    pub const ONE: Dyadic = Dyadic { num: 1, log2_den: 0 };

    /// Build `num / 2^log2_den`, normalizing the representation.
    pub fn new(num: i64, log2_den: u32) -> Self {
        let mut d = Dyadic { num, log2_den };
        d.normalize();
        d
    }

    pub fn from_int(n: i64) -> Self {
        Dyadic { num: n, log2_den: 0 }
    }

    /// `1 / 2^k`.
    pub fn unit_fraction(log2_den: u32) -> Self {
        Dyadic { num: 1, log2_den }
    }

    fn normalize(&mut self) {
        if self.num == 0 {
            self.log2_den = 0;
            return;
        }
        while self.log2_den > 0 && self.num % 2 == 0 {
            self.num /= 2;
            self.log2_den -= 1;
        }
    }

    pub fn numerator(&self) -> i64 {
        self.num
    }

    pub fn log2_denominator(&self) -> u32 {
        self.log2_den
    }

    pub fn denominator(&self) -> u64 {
        1u64 << self.log2_den
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    pub fn is_one(&self) -> bool {
        self.num == 1 && self.log2_den == 0
    }

    /// True when the value lies in `(0, 1]` — the valid range for a
    /// positional increment.
    pub fn is_valid_increment(&self) -> bool {
        *self > Dyadic::ZERO && *self <= Dyadic::ONE
    }

    pub fn checked_add(self, rhs: Dyadic) -> Result<Dyadic, DyadicError> {
        let l = self.log2_den.max(rhs.log2_den);
        let a = (self.num as i128) << (l - self.log2_den);
        let b = (rhs.num as i128) << (l - rhs.log2_den);
        let sum = a + b;
        if sum.unsigned_abs() > i64::MAX as u128 {
            return Err(DyadicError::Overflow);
        }
        Ok(Dyadic::new(sum as i64, l))
    }

    /// Multiply by a non-negative integer count (closed-form sums).
    pub fn checked_mul_int(self, count: u64) -> Result<Dyadic, DyadicError> {
        let prod = (self.num as i128) * (count as i128);
        if prod.unsigned_abs() > i64::MAX as u128 {
            return Err(DyadicError::Overflow);
        }
        Ok(Dyadic::new(prod as i64, self.log2_den))
    }

    /// Exact conversion; the numerator always fits in the `f64` mantissa at
    /// the scales this crate produces (positions bounded by ~2^40).
    pub fn to_f64(self) -> f64 {
        debug_assert!(
            self.num.abs() < EXACT_F64_LIMIT,
            "dyadic numerator exceeds exact f64 range"
        );
        (self.num as f64) * 2f64.powi(-(self.log2_den as i32))
    }
}

impl PartialOrd for Dyadic {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dyadic {
    fn cmp(&self, other: &Self) -> Ordering {
        let l = self.log2_den.max(other.log2_den);
        let a = (self.num as i128) << (l - self.log2_den);
        let b = (other.num as i128) << (l - other.log2_den);
        a.cmp(&b)
    }
}

impl fmt::Display for Dyadic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.log2_den == 0 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.denominator())
        }
    }
}

impl FromStr for Dyadic {
    type Err = DyadicError;

    /// Accepts `"1"`, `"1/256"`, `"3/8"`. The denominator must be a power
    /// of two.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.split_once('/') {
            None => {
                let n: i64 = s.parse().map_err(|_| DyadicError::Malformed(s.into()))?;
                Ok(Dyadic::from_int(n))
            }
            Some((num, den)) => {
                let n: i64 = num
                    .trim()
                    .parse()
                    .map_err(|_| DyadicError::Malformed(s.into()))?;
                let d: u64 = den
                    .trim()
                    .parse()
                    .map_err(|_| DyadicError::Malformed(s.into()))?;
                if d == 0 {
                    return Err(DyadicError::ZeroDenominator);
                }
                if !d.is_power_of_two() {
                    return Err(DyadicError::NonDyadicDenominator(d));
                }
                Ok(Dyadic::new(n, d.trailing_zeros()))
            }
        }
    }
}

impl Serialize for Dyadic {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Dyadic {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_representation() {
        assert_eq!(Dyadic::new(4, 3), Dyadic::new(1, 1));
        assert_eq!(Dyadic::new(4, 3).to_f64(), 0.5);
        assert_eq!(Dyadic::new(0, 7), Dyadic::ZERO);
    }

    #[test]
    fn parses_and_prints() {
        let d: Dyadic = "1/256".parse().unwrap();
        assert_eq!(d, Dyadic::unit_fraction(8));
        assert_eq!(d.to_string(), "1/256");
        assert_eq!("1".parse::<Dyadic>().unwrap(), Dyadic::ONE);
        assert_eq!("6/8".parse::<Dyadic>().unwrap().to_string(), "3/4");
        assert!("1/3".parse::<Dyadic>().is_err());
        assert!("1/0".parse::<Dyadic>().is_err());
        assert!("x".parse::<Dyadic>().is_err());
    }

    #[test]
    fn exact_addition() {
        let mut acc = Dyadic::ZERO;
        for _ in 0..3 {
            acc = acc.checked_add(Dyadic::unit_fraction(2)).unwrap();
        }
        assert_eq!(acc, Dyadic::new(3, 2));
        assert_eq!(acc.to_f64(), 0.75);
        acc = acc.checked_add(Dyadic::unit_fraction(2)).unwrap();
        assert_eq!(acc, Dyadic::ONE);
    }

    #[test]
    fn mul_int_closed_form() {
        let d = Dyadic::unit_fraction(3); // 1/8
        assert_eq!(d.checked_mul_int(2560).unwrap().to_f64(), 320.0);
    }

    #[test]
    fn ordering_crosses_denominators() {
        let a: Dyadic = "1/2".parse().unwrap();
        let b: Dyadic = "3/8".parse().unwrap();
        assert!(a > b);
        assert!(Dyadic::ZERO < b);
        assert!("1/256".parse::<Dyadic>().unwrap().is_valid_increment());
        assert!(!Dyadic::from_int(2).is_valid_increment());
        assert!(!Dyadic::ZERO.is_valid_increment());
    }

    #[test]
    fn serde_round_trip() {
        let d: Dyadic = "5/16".parse().unwrap();
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, "\"5/16\"");
        let back: Dyadic = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }
}
