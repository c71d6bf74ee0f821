//! Source-side protocol state: monotone labeling and the retransmit-until-
//! acknowledged schedule.

use super::{NodeId, SourceMessage};
use crate::time::SimTime;
use std::collections::BTreeMap;

/// A submitted message awaiting its acknowledgement.
#[derive(Debug, Clone)]
pub struct UnackedMessage {
    pub msg: SourceMessage,
    pub attempts: u32,
    pub next_retry: SimTime,
}

#[derive(Debug, Clone)]
pub struct SourceState {
    pub id: NodeId,
    pub identity_tag: u64,
    next_seq: u64,
    pub unacked: BTreeMap<u64, UnackedMessage>,
}

impl SourceState {
    pub fn new(id: NodeId, identity_tag: u64) -> Self {
        SourceState { id, identity_tag, next_seq: 1, unacked: BTreeMap::new() }
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Labels a new payload with the next per-source sequence number and
    /// schedules its first retry at `first_retry`.
    pub fn submit(&mut self, payload: Vec<u8>, first_retry: SimTime) -> SourceMessage {
        let msg = SourceMessage {
            source: self.id,
            source_seq: self.next_seq,
            payload,
            identity_tag: self.identity_tag,
        };
        self.next_seq += 1;
        self.unacked.insert(
            msg.source_seq,
            UnackedMessage { msg: msg.clone(), attempts: 0, next_retry: first_retry },
        );
        msg
    }

    /// Clears a message once its acknowledgement is seen.
    pub fn mark_acked(&mut self, seq: u64) -> bool {
        self.unacked.remove(&seq).is_some()
    }

    /// Messages whose retry timer has fired. Each returned message has its
    /// attempt count bumped and the next retry pushed out by `retry_every`.
    pub fn due_retries(&mut self, now: SimTime, retry_every: crate::time::SimDuration) -> Vec<SourceMessage> {
        let mut due = Vec::new();
        for u in self.unacked.values_mut() {
            if u.next_retry <= now {
                u.attempts += 1;
                u.next_retry = now + retry_every;
                due.push(u.msg.clone());
            }
        }
        due
    }

    /// Sequence numbers that have exhausted `k_r` retries.
    pub fn exhausted(&self, k_r: u32) -> Vec<u64> {
        self.unacked
            .values()
            .filter(|u| u.attempts > k_r)
            .map(|u| u.msg.source_seq)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::SimDuration;

    #[test]
    fn labels_start_at_one_and_increment() {
        let mut s = SourceState::new(NodeId(3), 7);
        let m1 = s.submit(b"p".to_vec(), SimTime(10));
        assert_eq!(m1.label(), (NodeId(3), 1));
        for _ in 0..4 {
            s.submit(b"q".to_vec(), SimTime(10));
        }
        let m6 = s.submit(b"r".to_vec(), SimTime(10));
        assert_eq!(m6.label(), (NodeId(3), 6));
    }

    #[test]
    fn consecutive_submissions_have_distinct_labels() {
        let mut s = SourceState::new(NodeId(1), 0);
        let a = s.submit(b"a".to_vec(), SimTime(0));
        let b = s.submit(b"a".to_vec(), SimTime(0));
        assert_eq!(b.source_seq, a.source_seq + 1);
    }

    #[test]
    fn retries_until_acked() {
        let mut s = SourceState::new(NodeId(1), 0);
        let m = s.submit(b"x".to_vec(), SimTime(100));
        assert!(s.due_retries(SimTime(50), SimDuration(30)).is_empty());
        let due = s.due_retries(SimTime(100), SimDuration(30));
        assert_eq!(due.len(), 1);
        assert_eq!(s.unacked[&m.source_seq].attempts, 1);
        s.mark_acked(m.source_seq);
        assert!(s.due_retries(SimTime(200), SimDuration(30)).is_empty());
    }

    #[test]
    fn exhaustion_after_kr_attempts() {
        let mut s = SourceState::new(NodeId(1), 0);
        let m = s.submit(b"x".to_vec(), SimTime(0));
        for i in 0..4 {
            let due = s.due_retries(SimTime(i * 10), SimDuration(10));
            assert_eq!(due.len(), 1);
        }
        assert_eq!(s.exhausted(3), vec![m.source_seq]);
        assert!(s.exhausted(4).is_empty());
    }
}
