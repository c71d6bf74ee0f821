//! Secondary-ring membership, shared by secondary receivers and the
//! bridging primary. Secondary tokens carry the primary token numbers; a
//! member passes token n only once complete through primary token n.

use super::messages::{Action, RunCfg, SecRingUpdate, TimerTag, Wire};
use crate::layering::{secondary_gate, SecondaryGate};
use crate::protocol::{NodeId, ReceiverState, RecoveryItem};
use crate::reformation::FailureEvidence;
use crate::simnet::trace::{kind, TraceRecord};
use crate::time::SimTime;

#[derive(Debug, Clone)]
pub struct SecMember {
    pub ring_id: u16,
    pub order: Vec<NodeId>,
    pub my_idx: usize,
    /// Alignment anchor: the member at `anchor_idx` passes `anchor_n`.
    anchor_n: u64,
    anchor_idx: usize,
    /// Highest secondary token received from the predecessor.
    got_token: u64,
    /// Next secondary token this member is due to pass.
    next_pass: u64,
    /// Unconfirmed hop: (token, attempts).
    unacked: Option<(u64, u32)>,
    pending_gaps: Vec<RecoveryItem>,
    failure: Option<FailureEvidence>,
    pub passed_through: u64,
}

impl SecMember {
    pub fn new(ring_id: u16, order: Vec<NodeId>, me: NodeId) -> Self {
        let my_idx = order.iter().position(|n| *n == me).expect("member of ring");
        let mut sm = SecMember {
            ring_id,
            order,
            my_idx,
            anchor_n: 1,
            anchor_idx: 0,
            got_token: 0,
            next_pass: 0,
            unacked: None,
            pending_gaps: Vec::new(),
            failure: None,
            passed_through: 0,
        };
        sm.next_pass = sm.first_aligned(1);
        sm
    }

    fn len(&self) -> usize {
        self.order.len()
    }

    /// Smallest n >= from that this member passes under the alignment.
    fn first_aligned(&self, from: u64) -> u64 {
        let l = self.len() as u64;
        let want = (self.my_idx + self.len() - self.anchor_idx) as u64 % l;
        let mut n = from.max(self.anchor_n);
        while (n - self.anchor_n) % l != want {
            n += 1;
        }
        n
    }

    pub fn start(&mut self, rs: &ReceiverState, me: NodeId, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        self.try_pass(rs, me, now, cfg, out);
    }

    pub fn on_token(&mut self, n: u64, rs: &ReceiverState, me: NodeId, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        self.got_token = self.got_token.max(n);
        self.try_pass(rs, me, now, cfg, out);
    }

    pub fn on_hop_ack(&mut self, n: u64) {
        if matches!(self.unacked, Some((u, _)) if u == n) {
            self.unacked = None;
        }
    }

    pub fn on_retry(&mut self, n: u64, me: NodeId, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let Some((u, attempts)) = &mut self.unacked else { return };
        if *u != n {
            return;
        }
        *attempts += 1;
        if *attempts > cfg.k_r() {
            self.failure = Some(FailureEvidence::Token(n));
            self.unacked = None;
            return;
        }
        let next = self.successor();
        out.push(Action::Unicast(next, Wire::SecToken { ring: self.ring_id, n, from: me }));
        out.push(Action::Timer(now + cfg.tau_r(), TimerTag::SecRetry { n }));
    }

    fn successor(&self) -> NodeId {
        self.order[(self.my_idx + 1) % self.len()]
    }

    /// Passes every due token the primary-completeness gate allows. Gaps are
    /// left in `pending_gaps` for the owner to request from its assigned
    /// support.
    pub fn try_pass(&mut self, rs: &ReceiverState, me: NodeId, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        loop {
            let n = self.next_pass;
            let is_initiator = n == self.anchor_n && self.my_idx == self.anchor_idx;
            if !is_initiator && self.got_token + 1 < n {
                return;
            }
            if self.unacked.is_some() {
                return;
            }
            match secondary_gate(rs, n) {
                SecondaryGate::Pass => {
                    out.push(Action::Trace(
                        TraceRecord::new(now, cfg.name(me), kind::SEC_PASS)
                            .field("ring", self.ring_id)
                            .field("n", n),
                    ));
                    let next = self.successor();
                    out.push(Action::Unicast(next, Wire::SecToken { ring: self.ring_id, n, from: me }));
                    out.push(Action::Timer(now + cfg.tau_r(), TimerTag::SecRetry { n }));
                    self.unacked = Some((n, 0));
                    self.passed_through = n;
                    self.next_pass = self.first_aligned(n + 1);
                }
                SecondaryGate::Hold(gaps) => {
                    self.pending_gaps = gaps;
                    return;
                }
            }
        }
    }

    pub fn take_gaps(&mut self) -> Vec<RecoveryItem> {
        std::mem::take(&mut self.pending_gaps)
    }

    pub fn take_failure(&mut self) -> Option<FailureEvidence> {
        self.failure.take()
    }

    pub fn quiet(&self) -> bool {
        self.pending_gaps.is_empty()
    }

    /// Adopts a repaired ring: membership without the dead node, resuming at
    /// `resume_n` from `starter`.
    pub fn adopt(&mut self, update: SecRingUpdate, me: NodeId) {
        if update.ring != self.ring_id || !update.order.contains(&me) {
            return;
        }
        let starter_idx = update.order.iter().position(|n| *n == update.starter).unwrap_or(0);
        self.order = update.order;
        self.my_idx = self.order.iter().position(|n| *n == me).expect("member");
        self.anchor_n = update.resume_n;
        self.anchor_idx = starter_idx;
        self.got_token = update.resume_n.saturating_sub(1);
        self.unacked = None;
        self.next_pass = self.first_aligned(update.resume_n);
    }
}
