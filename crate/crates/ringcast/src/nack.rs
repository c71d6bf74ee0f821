//! NACK-reduction scheduling: receivers are partitioned into `k_p` request
//! waves per token, and a pending request is cancelled when an overheard
//! retransmission already fills the gap.

use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NackError {
    #[error("nack_k_p must satisfy 1 <= k_p <= m (got k_p={k_p}, m={m})")]
    InvalidKp { k_p: usize, m: usize },
}

/// The request-wave partition for one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NackSchedule {
    pub m: usize,
    pub k_p: usize,
    /// `sets[i]` holds the ring positions allowed to request starting at the
    /// i-th token pass after the missing one.
    pub sets: Vec<BTreeSet<usize>>,
}

/// Request sets for the message acknowledged by a token sent from ring
/// position `r`: `S_i = { (r + i + 1 + j*k_p) mod m : 0 <= j <= (m-i-1)/k_p }`
/// with floor division, for `i = 0..k_p-1`.
pub fn nack_sets(r: usize, m: usize, k_p: usize) -> Result<Vec<BTreeSet<usize>>, NackError> {
    if k_p < 1 || k_p > m {
        return Err(NackError::InvalidKp { k_p, m });
    }
    let mut sets = Vec::with_capacity(k_p);
    for i in 0..k_p {
        let mut set = BTreeSet::new();
        let j_max = (m - i - 1) / k_p;
        for j in 0..=j_max {
            set.insert((r + i + 1 + j * k_p) % m);
        }
        sets.push(set);
    }
    Ok(sets)
}

/// The wave index of `pos` for a token sent from position `r`, i.e. how many
/// token passes it must wait before requesting.
pub fn wave_index(pos: usize, r: usize, m: usize, k_p: usize) -> usize {
    // position offsets 0..m-1 behind r+1 fall into waves round-robin
    ((pos + m - r - 1) % m) % k_p
}

/// Whether `pos` may request the message acknowledged by token `t` (sent by
/// position `r`) once token `current` has been observed. Once a receiver's
/// wave arrives it stays eligible until recovered.
pub fn may_request(pos: usize, t: u64, r: usize, current: u64, m: usize, k_p: usize) -> bool {
    debug_assert!(current >= t);
    current - t >= wave_index(pos, r, m, k_p) as u64
}

/// Drops every pending request the overheard retransmission satisfies.
pub fn suppress_on_overheard<K: Ord>(pending: &mut BTreeSet<K>, recovered: &K) {
    pending.remove(recovered);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn sets_m12_kp3() {
        let sets = nack_sets(0, 12, 3).unwrap();
        assert_eq!(sets[0], set(&[1, 4, 7, 10]));
        assert_eq!(sets[1], set(&[2, 5, 8, 11]));
        assert_eq!(sets[2], set(&[3, 6, 9, 0]));
    }

    #[test]
    fn sets_m5_kp2_offset_sender() {
        let sets = nack_sets(2, 5, 2).unwrap();
        assert_eq!(sets[0], set(&[3, 0, 2]));
        assert_eq!(sets[1], set(&[4, 1]));
    }

    #[test]
    fn kp1_is_single_full_set() {
        let sets = nack_sets(3, 7, 1).unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0], (0..7).collect());
    }

    #[test]
    fn invalid_kp_rejected() {
        assert!(nack_sets(0, 4, 0).is_err());
        assert!(nack_sets(0, 4, 5).is_err());
    }

    #[test]
    fn eligibility_follows_sets() {
        // from the m=12, k_p=3 partition above
        assert!(may_request(4, 100, 0, 100, 12, 3));
        assert!(!may_request(3, 100, 0, 100, 12, 3));
        assert!(may_request(3, 100, 0, 102, 12, 3));
        // everyone is eligible within k_p passes
        for pos in 0..12 {
            assert!(may_request(pos, 100, 0, 100 + 3 - 1, 12, 3));
        }
    }

    #[test]
    fn suppression_cancels_matching_request() {
        let mut pending = set(&[17]);
        suppress_on_overheard(&mut pending, &18);
        assert_eq!(pending, set(&[17]));
        suppress_on_overheard(&mut pending, &17);
        assert!(pending.is_empty());
        suppress_on_overheard(&mut pending, &17); // no-op on empty
        assert!(pending.is_empty());
    }

    #[test]
    fn coverage_and_bounded_wait_exhaustive() {
        // every position appears in some set, and its wave index points at
        // the set it belongs to, for all m <= 32, k_p <= m, all senders
        for m in 1..=32usize {
            for k_p in 1..=m {
                for r in [0, m / 2, m - 1] {
                    let sets = nack_sets(r, m, k_p).unwrap();
                    let mut covered = BTreeSet::new();
                    for s in &sets {
                        covered.extend(s.iter().copied());
                    }
                    assert_eq!(covered.len(), m, "m={m} k_p={k_p} r={r}");
                    for pos in 0..m {
                        let i = wave_index(pos, r, m, k_p);
                        assert!(i < k_p);
                        assert!(sets[i].contains(&pos), "pos {pos} not in wave {i} (m={m} k_p={k_p} r={r})");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn union_covers_all_positions(m in 1usize..64, seed in 0usize..1000) {
            let k_p = seed % m + 1;
            let r = seed % m;
            let sets = nack_sets(r, m, k_p).unwrap();
            let mut covered = BTreeSet::new();
            for s in &sets { covered.extend(s.iter().copied()); }
            prop_assert_eq!(covered.len(), m);
        }
    }
}
