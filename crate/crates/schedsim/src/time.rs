//! Virtual time as an exact count of microseconds.
//!
//! Every timestamp and duration in a simulation is a whole number of
//! microseconds, and the clock only ever advances by integer addition.
//! That keeps runs reproducible bit-for-bit: no floating-point accumulation,
//! no dependence on summation order, identical traces on every platform.
//! Times print with a fixed six-digit fraction, which round-trips losslessly
//! through trace files.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};
use std::str::FromStr;

/// A point in virtual time or a duration, in whole microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(micros: u64) -> Self {
        SimTime(micros)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    /// Converts a second count to virtual time, rounding to the nearest
    /// microsecond. Panics on negative, NaN, or infinite input; cost-model
    /// fields are validated before they reach this point.
    pub fn from_secs_f64(secs: f64) -> Self {
        assert!(
            secs.is_finite() && secs >= 0.0,
            "virtual time must be finite and non-negative, got {secs}"
        );
        SimTime((secs * 1e6).round() as u64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_add(rhs.0).expect("virtual time overflow"))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        *self = *self + rhs;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(
            self.0
                .checked_sub(rhs.0)
                .expect("virtual time underflow: subtrahend exceeds minuend"),
        )
    }
}

impl Sum for SimTime {
    fn sum<I: Iterator<Item = SimTime>>(iter: I) -> SimTime {
        iter.fold(SimTime::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid time literal {literal:?}: {reason}")]
pub struct ParseTimeError {
    pub literal: String,
    pub reason: &'static str,
}

impl FromStr for SimTime {
    type Err = ParseTimeError;

    /// Parses `seconds[.fraction]` with at most six fractional digits.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason| ParseTimeError {
            literal: s.to_string(),
            reason,
        };
        let (whole, frac) = match s.split_once('.') {
            Some((_, "")) => return Err(err("trailing dot without fraction digits")),
            Some((w, f)) => (w, f),
            None => (s, ""),
        };
        if whole.is_empty() || !whole.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err("seconds part must be a non-negative integer"));
        }
        if frac.len() > 6 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err("fraction must be at most six digits"));
        }
        let secs: u64 = whole
            .parse()
            .map_err(|_| err("seconds part out of range"))?;
        let mut micros = 0u64;
        if !frac.is_empty() {
            micros = frac.parse::<u64>().expect("digits checked above");
            for _ in frac.len()..6 {
                micros *= 10;
            }
        }
        secs.checked_mul(1_000_000)
            .and_then(|s| s.checked_add(micros))
            .map(SimTime)
            .ok_or_else(|| err("value out of range"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn display_uses_six_digit_fraction() {
        assert_eq!(SimTime::from_micros(0).to_string(), "0.000000");
        assert_eq!(SimTime::from_micros(1).to_string(), "0.000001");
        assert_eq!(SimTime::from_micros(5_500_000).to_string(), "5.500000");
        assert_eq!(SimTime::from_micros(12_345_678).to_string(), "12.345678");
    }

    #[test]
    fn from_secs_rounds_to_nearest_microsecond() {
        assert_eq!(SimTime::from_secs_f64(0.0125).as_micros(), 12_500);
        assert_eq!(SimTime::from_secs_f64(1.0).as_micros(), 1_000_000);
        assert_eq!(SimTime::from_secs_f64(0.25).as_micros(), 250_000);
        // Sub-microsecond inputs round deterministically.
        assert_eq!(SimTime::from_secs_f64(4.9e-7).as_micros(), 0);
        assert_eq!(SimTime::from_secs_f64(5.1e-7).as_micros(), 1);
    }

    #[test]
    fn parse_accepts_short_fractions() {
        assert_eq!("5.5".parse::<SimTime>().unwrap().as_micros(), 5_500_000);
        assert_eq!("3".parse::<SimTime>().unwrap().as_micros(), 3_000_000);
        assert_eq!(
            "0.000001".parse::<SimTime>().unwrap().as_micros(),
            1
        );
    }

    #[test]
    fn parse_rejects_garbage() {
        for bad in ["", "-1", "1.2345678", "1.2x", "x.5", "1.", "."] {
            assert!(bad.parse::<SimTime>().is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn exact_addition_is_order_independent() {
        let parts = [
            SimTime::from_secs_f64(0.1),
            SimTime::from_secs_f64(0.2),
            SimTime::from_secs_f64(0.3),
            SimTime::from_secs_f64(0.4),
        ];
        let forward: SimTime = parts.iter().copied().sum();
        let backward: SimTime = parts.iter().rev().copied().sum();
        assert_eq!(forward, backward);
        assert_eq!(forward.as_micros(), 1_000_000);
    }

    proptest! {
        #[test]
        fn display_parse_round_trip(us in 0u64..=10_000_000_000_000) {
            let t = SimTime::from_micros(us);
            let back: SimTime = t.to_string().parse().unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
