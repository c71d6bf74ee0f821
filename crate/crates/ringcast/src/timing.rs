//! Timing calculus for the periodic token protocol: token period, request
//! retry interval, the fair-delivery delay between acknowledgement and
//! remulticast, and per-token deadlines.

use crate::time::{SimDuration, SimTime};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TimingError {
    #[error("token numbers start at 1")]
    InvalidTokenNumber,
    #[error("timing invariant violated: {0}")]
    Invariant(String),
}

/// The protocol's timing knobs.
///
/// `delta_n` is the one-way network delay budget, `k_r` the retry limit for
/// positive-acknowledgement recovery, `x` the transmit time of a
/// request+response pair, `p` its processing time. `tau_r` is the request
/// retry interval, `tau_t` the token period and `delta_a` the delay between
/// an acknowledgement's timestamp and the simultaneous remulticast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingParams {
    pub delta_n: SimDuration,
    pub k_r: u32,
    pub x: SimDuration,
    pub p: SimDuration,
    pub tau_r: SimDuration,
    pub tau_t: SimDuration,
    pub delta_a: SimDuration,
}

impl TimingParams {
    /// Checks the field invariants. `delta_a == 0` is accepted as the
    /// documented unfair-contrast mode.
    pub fn validate(&self) -> Result<(), TimingError> {
        let min_tau_r = self.delta_n * 2 + self.x + self.p;
        if self.tau_r < min_tau_r {
            return Err(TimingError::Invariant(format!(
                "tau_r ({}) < 2*delta_n + x + p ({})",
                self.tau_r, min_tau_r
            )));
        }
        if self.tau_t < self.delta_a {
            return Err(TimingError::Invariant(format!(
                "tau_t ({}) < delta_a ({})",
                self.tau_t, self.delta_a
            )));
        }
        if self.delta_a != SimDuration::ZERO && self.delta_a < self.delta_n {
            return Err(TimingError::Invariant(format!(
                "delta_a ({}) < delta_n ({})",
                self.delta_a, self.delta_n
            )));
        }
        Ok(())
    }
}

/// Token period for the given delay budget and retry limit:
/// `(1 + 2*k_r)*delta_n + k_r*(x + p)`.
pub fn token_period(delta_n: SimDuration, k_r: u32, x: SimDuration, p: SimDuration) -> SimDuration {
    delta_n * (1 + 2 * k_r as u64) + (x + p) * k_r as u64
}

/// Derives the full parameter set from the base quadruple.
///
/// `tau_r` is a full request round trip plus processing; `delta_a` covers
/// late-token detection plus `k_r` recovery rounds and equals the token
/// period exactly.
pub fn derive_params(delta_n: SimDuration, k_r: u32, x: SimDuration, p: SimDuration) -> TimingParams {
    let tau_r = delta_n * 2 + x + p;
    let delta_a = delta_n + tau_r * k_r as u64;
    TimingParams {
        delta_n,
        k_r,
        x,
        p,
        tau_r,
        tau_t: delta_a,
        delta_a,
    }
}

/// The instant a batch acknowledged at `ack_timestamp` is released by every
/// operable receiver.
pub fn remulticast_time(ack_timestamp: SimTime, delta_a: SimDuration) -> SimTime {
    ack_timestamp + delta_a
}

/// Scheduled emission time of token `t` and the instant it is considered
/// late. A node that has not seen acknowledgement `t` by `late_at` starts
/// recovery, and after `k_r` failed retries reports a failure.
pub fn token_deadline(
    token_num: u64,
    epoch: SimTime,
    tau_t: SimDuration,
    delta_n: SimDuration,
) -> Result<(SimTime, SimTime), TimingError> {
    if token_num == 0 {
        return Err(TimingError::InvalidTokenNumber);
    }
    let scheduled = epoch + tau_t * token_num;
    Ok((scheduled, scheduled + delta_n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ms(v: u64) -> SimDuration {
        SimDuration::from_millis(v)
    }

    #[test]
    fn token_period_closed_form() {
        // the international-system case: 2.86s, within 15% of 3s
        let t = token_period(ms(400), 3, ms(0), ms(20));
        assert_eq!(t, SimDuration::from_micros(2_860_000));
        assert!((t.as_secs_f64() - 3.0).abs() <= 0.45);
        // no retries leaves only the delay budget
        assert_eq!(token_period(ms(123), 0, ms(9), ms(7)), ms(123));
        // propagation-only case
        assert_eq!(token_period(ms(75), 3, ms(0), ms(0)), ms(525));
    }

    #[test]
    fn derive_params_plugs_formulas() {
        let p = derive_params(ms(75), 3, ms(0), ms(0));
        assert_eq!(p.tau_r, ms(150));
        assert_eq!(p.delta_a, ms(525));
        assert_eq!(p.tau_t, ms(525));

        let p = derive_params(ms(400), 3, ms(0), ms(20));
        assert_eq!(p.tau_r, ms(820));
        assert_eq!(p.tau_t, SimDuration::from_micros(2_860_000));

        let p = derive_params(ms(80), 0, ms(5), ms(5));
        assert_eq!(p.delta_a, ms(80));
    }

    #[test]
    fn derived_params_always_validate() {
        for (d, k, x, p) in [(75u64, 3u32, 0u64, 0u64), (400, 3, 0, 20), (10, 0, 0, 0), (1, 7, 2, 3)] {
            derive_params(ms(d), k, ms(x), ms(p)).validate().unwrap();
        }
    }

    #[test]
    fn unfair_mode_zero_delta_a_allowed() {
        let mut p = derive_params(ms(75), 3, ms(0), ms(0));
        p.delta_a = SimDuration::ZERO;
        p.validate().unwrap();
        p.delta_a = ms(10); // below delta_n and nonzero
        assert!(p.validate().is_err());
    }

    #[test]
    fn remulticast_is_additive() {
        let ts = SimTime(10_000_000);
        assert_eq!(remulticast_time(ts, SimDuration::from_secs(3)), SimTime(13_000_000));
        assert_eq!(remulticast_time(ts, SimDuration::ZERO), ts);
    }

    #[test]
    fn token_deadline_schedule() {
        let (sched, late) = token_deadline(1, SimTime::ZERO, ms(525), ms(75)).unwrap();
        assert_eq!(sched, SimTime(525_000));
        assert_eq!(late, SimTime(600_000));
        assert_eq!(token_deadline(0, SimTime::ZERO, ms(525), ms(75)), Err(TimingError::InvalidTokenNumber));
        // consecutive tokens are exactly tau_t apart
        let (s1, _) = token_deadline(7, SimTime(100), ms(40), ms(5)).unwrap();
        let (s2, _) = token_deadline(8, SimTime(100), ms(40), ms(5)).unwrap();
        assert_eq!(s2 - s1, ms(40));
    }

    proptest! {
        #[test]
        fn derive_matches_closed_form(d in 0u64..5_000_000, k in 0u32..16, x in 0u64..500_000, p in 0u64..500_000) {
            let params = derive_params(SimDuration(d), k, SimDuration(x), SimDuration(p));
            prop_assert_eq!(params.tau_t, token_period(SimDuration(d), k, SimDuration(x), SimDuration(p)));
        }

        #[test]
        fn token_period_monotone(d in 0u64..1_000_000, k in 0u32..8, x in 0u64..100_000, p in 0u64..100_000,
                                 bump in 1u64..50_000) {
            let base = token_period(SimDuration(d), k, SimDuration(x), SimDuration(p));
            prop_assert!(token_period(SimDuration(d + bump), k, SimDuration(x), SimDuration(p)) >= base);
            prop_assert!(token_period(SimDuration(d), k + 1, SimDuration(x), SimDuration(p)) >= base);
            prop_assert!(token_period(SimDuration(d), k, SimDuration(x + bump), SimDuration(p)) >= base);
            prop_assert!(token_period(SimDuration(d), k, SimDuration(x), SimDuration(p + bump)) >= base);
        }
    }
}
