//! Fixed-point CPM amounts.
//!
//! Every price that is summed into a user's cost is held as an integer count of
//! micro-CPM (1e-6 CPM). Sums are then exact and independent of accumulation
//! order, which keeps `V = C + E` bit-exact.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const MICROS_PER_CPM: i64 = 1_000_000;

/// An amount in CPM, stored as integer micro-CPM.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MicroCpm(i64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecimalError {
    #[error("empty decimal")]
    Empty,
    #[error("invalid decimal literal {0:?}")]
    Invalid(String),
    #[error("decimal {0:?} out of range")]
    OutOfRange(String),
}

impl MicroCpm {
    pub const ZERO: MicroCpm = MicroCpm(0);

    pub const fn from_micros(micros: i64) -> Self {
        MicroCpm(micros)
    }

    pub const fn micros(self) -> i64 {
        self.0
    }

    /// Nearest micro-CPM to a floating CPM value.
    pub fn from_cpm_f64(cpm: f64) -> Self {
        MicroCpm((cpm * MICROS_PER_CPM as f64).round() as i64)
    }

    pub fn as_cpm_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_CPM as f64
    }

    /// USD paid for this many CPM worth of impressions (1 CPM = $0.001).
    pub fn as_usd(self) -> f64 {
        self.as_cpm_f64() / 1000.0
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }

    /// Scales by a positive ratio, rounding to the nearest micro-CPM.
    pub fn scale(self, ratio: f64) -> Self {
        MicroCpm((self.0 as f64 * ratio).round() as i64)
    }

    /// Parses a plain decimal literal (`12`, `0.95`, `-3.1`, `.5`) without going
    /// through floating point. Digits past the sixth fractional place are
    /// rounded half-up.
    pub fn parse_decimal(raw: &str) -> Result<Self, DecimalError> {
        let s = raw.trim();
        if s.is_empty() {
            return Err(DecimalError::Empty);
        }
        let (negative, body) = match s.as_bytes()[0] {
            b'-' => (true, &s[1..]),
            b'+' => (false, &s[1..]),
            _ => (false, s),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(DecimalError::Invalid(raw.to_string()));
        }
        if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
            return Err(DecimalError::Invalid(raw.to_string()));
        }
        let int_digits = int_part.trim_start_matches('0');
        if int_digits.len() > 12 {
            return Err(DecimalError::OutOfRange(raw.to_string()));
        }
        let mut micros: i64 = 0;
        for b in int_digits.bytes() {
            micros = micros * 10 + i64::from(b - b'0');
        }
        micros *= MICROS_PER_CPM;
        let mut scale = MICROS_PER_CPM / 10;
        let mut frac_bytes = frac_part.bytes();
        for b in frac_bytes.by_ref().take(6) {
            micros += i64::from(b - b'0') * scale;
            scale /= 10;
        }
        if let Some(next) = frac_bytes.next() {
            if next >= b'5' {
                micros += 1;
            }
        }
        Ok(MicroCpm(if negative { -micros } else { micros }))
    }
}

impl Add for MicroCpm {
    type Output = MicroCpm;
    fn add(self, rhs: Self) -> Self {
        MicroCpm(self.0 + rhs.0)
    }
}

impl Sub for MicroCpm {
    type Output = MicroCpm;
    fn sub(self, rhs: Self) -> Self {
        MicroCpm(self.0 - rhs.0)
    }
}

impl AddAssign for MicroCpm {
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

impl Sum for MicroCpm {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(MicroCpm::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a MicroCpm> for MicroCpm {
    fn sum<I: Iterator<Item = &'a MicroCpm>>(iter: I) -> Self {
        iter.copied().sum()
    }
}

impl fmt::Display for MicroCpm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let int = abs / MICROS_PER_CPM as u64;
        let frac = abs % MICROS_PER_CPM as u64;
        if frac == 0 {
            return write!(f, "{sign}{int}");
        }
        let digits = format!("{frac:06}");
        write!(f, "{sign}{int}.{}", digits.trim_end_matches('0'))
    }
}

impl FromStr for MicroCpm {
    type Err = DecimalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MicroCpm::parse_decimal(s)
    }
}

// Serialized as a plain JSON number in CPM. Values carry at most six
// fractional digits, so the shortest float rendering parses back exactly.
impl Serialize for MicroCpm {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_cpm_f64())
    }
}

impl<'de> Deserialize<'de> for MicroCpm {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(deserializer)?;
        if !v.is_finite() {
            return Err(serde::de::Error::custom("non-finite CPM"));
        }
        Ok(MicroCpm::from_cpm_f64(v))
    }
}
