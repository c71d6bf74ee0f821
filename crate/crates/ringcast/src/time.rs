//! Simulated time. Everything is integer microseconds so that timing
//! arithmetic is exact and traces are reproducible bit-for-bit.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

/// An instant on the simulation clock, in microseconds since run start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

/// A span of simulated time, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimDuration(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(rhs.0))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub fn from_micros(us: u64) -> Self {
        SimDuration(us)
    }

    pub fn from_millis(ms: u64) -> Self {
        SimDuration(ms * 1_000)
    }

    pub fn from_secs(s: u64) -> Self {
        SimDuration(s * 1_000_000)
    }

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Sub<SimTime> for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        SimDuration(self.0 - rhs.0)
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl Sub for SimDuration {
    type Output = SimDuration;
    fn sub(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 - rhs.0)
    }
}

impl Mul<u64> for SimDuration {
    type Output = SimDuration;
    fn mul(self, rhs: u64) -> SimDuration {
        SimDuration(self.0 * rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return write!(f, "0");
        }
        if self.0 % 1_000_000 == 0 {
            write!(f, "{}s", self.0 / 1_000_000)
        } else if self.0 % 1_000 == 0 {
            write!(f, "{}ms", self.0 / 1_000)
        } else {
            write!(f, "{}us", self.0)
        }
    }
}

/// Parses durations written as `2.86s`, `400ms`, `75us` or a bare
/// microsecond count.
pub fn parse_duration(s: &str) -> Result<SimDuration, String> {
    let s = s.trim();
    let (num, scale) = if let Some(v) = s.strip_suffix("us") {
        (v, 1u64)
    } else if let Some(v) = s.strip_suffix("ms") {
        (v, 1_000)
    } else if let Some(v) = s.strip_suffix('s') {
        (v, 1_000_000)
    } else {
        (s, 1)
    };
    let num = num.trim();
    if let Ok(i) = num.parse::<u64>() {
        return Ok(SimDuration(i * scale));
    }
    // fractional values like 2.86s stay exact as long as they land on a
    // whole number of microseconds
    match num.parse::<f64>() {
        Ok(v) if v >= 0.0 => {
            let us = v * scale as f64;
            let rounded = us.round();
            if (us - rounded).abs() > 1e-6 {
                return Err(format!("duration `{s}` is finer than 1us"));
            }
            Ok(SimDuration(rounded as u64))
        }
        _ => Err(format!("invalid duration `{s}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_units() {
        assert_eq!(parse_duration("75ms").unwrap(), SimDuration::from_millis(75));
        assert_eq!(parse_duration("2.86s").unwrap(), SimDuration::from_micros(2_860_000));
        assert_eq!(parse_duration("10us").unwrap(), SimDuration(10));
        assert_eq!(parse_duration("42").unwrap(), SimDuration(42));
        assert_eq!(parse_duration("0").unwrap(), SimDuration::ZERO);
        assert!(parse_duration("abc").is_err());
        assert!(parse_duration("-5ms").is_err());
    }

    #[test]
    fn display_round_trips() {
        for d in [SimDuration(0), SimDuration(525_000), SimDuration(2_860_000), SimDuration(7)] {
            assert_eq!(parse_duration(&d.to_string()).unwrap(), d);
        }
    }
}
