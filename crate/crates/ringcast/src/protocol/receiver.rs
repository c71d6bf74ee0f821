//! Receiver-side protocol state: the source-message and acknowledgement
//! update rules, token acceptance, batch emission and retransmission
//! service.

use super::{
    AckMessage, Corruption, Effect, Label, NodeId, ProtocolError, RecoveryItem, RecoveryReply,
    RetransmitStimulus, SourceMessage,
};
use crate::time::SimTime;
use std::collections::BTreeMap;

/// How many acknowledgements an open-ended `AcksFrom` request is answered
/// with per round.
pub const ACK_REPLY_SPAN: u64 = 32;

/// Outcome of a token-acceptance attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenDecision {
    Accepted,
    /// Gaps to recover from the previous token site before retrying.
    NeedRecovery(Vec<RecoveryItem>),
}

/// An outstanding retransmission request tracked by the owning node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingRequest {
    pub item: RecoveryItem,
    pub target: NodeId,
    pub attempts: u32,
    pub next_retry: SimTime,
    /// Token number whose observation makes this node's NACK wave eligible.
    pub eligible_at_token: u64,
}

/// Full per-receiver protocol state.
#[derive(Debug, Clone)]
pub struct ReceiverState {
    pub id: NodeId,
    pub ring_pos: usize,
    /// The next acknowledgement number this receiver expects (t_r).
    pub next_token: u64,
    /// Per-source next expected (1 + highest acknowledged) sequence number.
    pub next_from_source: BTreeMap<NodeId, u64>,
    /// Unacknowledged messages in arrival order, ties broken by label.
    waiting: BTreeMap<(SimTime, Label), SourceMessage>,
    waiting_index: BTreeMap<Label, SimTime>,
    /// Highest stored (acknowledged or still waiting) seq per source; the
    /// next storable message from `s` is `max(M_{s,r}, stored_high + 1)`.
    stored_high: BTreeMap<NodeId, u64>,
    /// Out-of-order arrivals held until their per-source gap closes.
    pub future: BTreeMap<Label, SourceMessage>,
    /// Committed log: global sequence -> (message, covering token).
    pub log: BTreeMap<u64, (SourceMessage, u64)>,
    committed_seq_of: BTreeMap<Label, u64>,
    pub acks_seen: BTreeMap<u64, AckMessage>,
    /// Acks held while their batch messages (or earlier acks) are recovered.
    pub held_acks: BTreeMap<u64, AckMessage>,
    /// Next unassigned global sequence number.
    pub next_global: u64,
    pub holds_token: bool,
    pub serving_retransmissions: bool,
    pub last_emitted: Option<u64>,
    pub pending_requests: Vec<PendingRequest>,
    /// Lowest retained global sequence (1 keeps everything).
    pub retention_floor: u64,
}

impl ReceiverState {
    pub fn new(id: NodeId, ring_pos: usize) -> Self {
        ReceiverState {
            id,
            ring_pos,
            next_token: 1,
            next_from_source: BTreeMap::new(),
            waiting: BTreeMap::new(),
            waiting_index: BTreeMap::new(),
            stored_high: BTreeMap::new(),
            future: BTreeMap::new(),
            log: BTreeMap::new(),
            committed_seq_of: BTreeMap::new(),
            acks_seen: BTreeMap::new(),
            held_acks: BTreeMap::new(),
            next_global: 1,
            holds_token: false,
            serving_retransmissions: false,
            last_emitted: None,
            pending_requests: Vec::new(),
            retention_floor: 1,
        }
    }

    pub fn waiting_len(&self) -> usize {
        self.waiting.len()
    }

    pub fn waiting_contains(&self, label: &Label) -> bool {
        self.waiting_index.contains_key(label)
    }

    pub fn committed_seq(&self, label: &Label) -> Option<u64> {
        self.committed_seq_of.get(label).copied()
    }

    /// True once every acknowledgement up to and including `token` has been
    /// committed.
    pub fn complete_through(&self, token: u64) -> bool {
        self.next_token > token
    }

    fn expected_from(&self, source: NodeId) -> u64 {
        self.next_from_source.get(&source).copied().unwrap_or(1)
    }

    fn next_storable(&self, source: NodeId) -> u64 {
        let acked = self.expected_from(source);
        let stored = self.stored_high.get(&source).copied().unwrap_or(0);
        acked.max(stored + 1)
    }

    /// Handles an arriving source message per the receiver update rules:
    /// already-acknowledged or already-stored copies are duplicates, the
    /// next expected message is stored awaiting acknowledgement, and a
    /// per-source gap means an acknowledgement was missed and everything
    /// from t_r forward is requested (the message itself is parked in
    /// `future` and re-fed once the gap closes).
    pub fn on_source_message(&mut self, msg: SourceMessage, now: SimTime) -> Effect {
        let seq = msg.source_seq;
        if seq < self.expected_from(msg.source) {
            return Effect::Duplicate;
        }
        let storable = self.next_storable(msg.source);
        if seq < storable {
            return Effect::Duplicate;
        }
        if seq == storable {
            self.store_waiting(msg, now);
            return Effect::Stored;
        }
        self.future.insert(msg.label(), msg);
        Effect::NeedAck { from: self.next_token, to: None }
    }

    fn store_waiting(&mut self, msg: SourceMessage, now: SimTime) {
        // key order = arrival order, same-instant ties broken by label
        let label = msg.label();
        self.stored_high
            .entry(msg.source)
            .and_modify(|h| *h = (*h).max(msg.source_seq))
            .or_insert(msg.source_seq);
        self.waiting.insert((now, label), msg);
        self.waiting_index.insert(label, now);
    }

    /// Messages from `future` that have become storable, in label order.
    /// The caller re-feeds them through `on_source_message`. Entries the
    /// protocol has since moved past (recovered through another path) are
    /// dropped as duplicates.
    pub fn take_ready_future(&mut self) -> Vec<SourceMessage> {
        let mut ready = Vec::new();
        let mut stale = Vec::new();
        for (s, q) in self.future.keys() {
            let storable = self.next_storable(*s);
            if *q == storable {
                ready.push((*s, *q));
            } else if *q < storable {
                stale.push((*s, *q));
            }
        }
        for l in stale {
            self.future.remove(&l);
        }
        ready.into_iter().filter_map(|l| self.future.remove(&l)).collect()
    }

    /// Handles an arriving acknowledgement per the update rules: old tokens
    /// are duplicates, future tokens are held while the intervening ones are
    /// requested, and the expected token commits its batch if every message
    /// is present (otherwise the absent ones are requested and the ack is
    /// held).
    pub fn on_ack(&mut self, ack: AckMessage) -> Effect {
        let t = ack.token_num;
        if t < self.next_token {
            return Effect::Duplicate;
        }
        if t > self.next_token {
            let from = self.next_token;
            self.held_acks.insert(t, ack);
            return Effect::NeedAck { from, to: Some(t - 1) };
        }
        if ack.base_global_seq != self.next_global {
            return Effect::TriggerReformation(Corruption::BaseMismatch {
                expected: self.next_global,
                got: ack.base_global_seq,
            });
        }
        for (j, label) in ack.acked.iter().enumerate() {
            if let Some(at) = self.committed_seq_of.get(label) {
                if *at != ack.global_seq_of(j) {
                    return Effect::TriggerReformation(Corruption::ConflictingAssignment {
                        label: *label,
                        committed_at: *at,
                        acked_at: ack.global_seq_of(j),
                    });
                }
            }
        }
        let missing: Vec<Label> = ack
            .acked
            .iter()
            .filter(|l| !self.waiting_index.contains_key(l))
            .copied()
            .collect();
        if !missing.is_empty() {
            self.held_acks.insert(t, ack);
            return Effect::NeedMessage(missing);
        }
        let globals = self.commit_batch(&ack);
        self.held_acks.remove(&t);
        self.acks_seen.insert(t, ack);
        self.next_token = t + 1;
        Effect::Committed(globals)
    }

    fn commit_batch(&mut self, ack: &AckMessage) -> Vec<u64> {
        let mut globals = Vec::with_capacity(ack.acked.len());
        for (j, label) in ack.acked.iter().enumerate() {
            let g = ack.global_seq_of(j);
            let at = self.waiting_index.remove(label).expect("batch entry present");
            let msg = self.waiting.remove(&(at, *label)).expect("waiting entry");
            self.log.insert(g, (msg, ack.token_num));
            self.committed_seq_of.insert(*label, g);
            let next = self.next_from_source.entry(label.0).or_insert(1);
            *next = (*next).max(label.1 + 1);
            globals.push(g);
        }
        self.next_global += ack.batch_len();
        globals
    }

    /// Emits the next acknowledgement: drains up to `k_cap` waiting messages
    /// in arrival order, assigns them the next global sequence numbers,
    /// commits them locally, stamps `now`, and gives up the token. The
    /// sender keeps serving retransmissions until the successor's own ack is
    /// observed.
    pub fn emit_ack(
        &mut self,
        now: SimTime,
        k_cap: usize,
        next_site: NodeId,
    ) -> Result<AckMessage, ProtocolError> {
        if !self.holds_token {
            return Err(ProtocolError::NotTokenHolder);
        }
        let batch: Vec<Label> = self.waiting.keys().take(k_cap).map(|(_, l)| *l).collect();
        let ack = AckMessage {
            token_num: self.next_token,
            timestamp: now,
            sender: self.id,
            next_site,
            base_global_seq: self.next_global,
            acked: batch,
        };
        self.commit_batch(&ack);
        self.acks_seen.insert(ack.token_num, ack.clone());
        self.last_emitted = Some(ack.token_num);
        self.next_token = ack.token_num + 1;
        self.holds_token = false;
        self.serving_retransmissions = true;
        Ok(ack)
    }

    /// Decides whether the token transferred by `ack` can be accepted: the
    /// node must be complete through `ack.token_num`. Otherwise the missing
    /// acks and messages are listed for recovery from the previous site.
    pub fn accept_token(&mut self, ack: &AckMessage) -> TokenDecision {
        debug_assert_eq!(ack.next_site, self.id);
        if self.complete_through(ack.token_num) {
            self.holds_token = true;
            self.serving_retransmissions = true;
            return TokenDecision::Accepted;
        }
        let mut gaps = Vec::new();
        for t in self.next_token..=ack.token_num {
            match self.held_acks.get(&t) {
                None => gaps.push(RecoveryItem::Ack(t)),
                Some(held) => {
                    for label in &held.acked {
                        if !self.waiting_index.contains_key(label)
                            && !self.committed_seq_of.contains_key(label)
                        {
                            gaps.push(RecoveryItem::MessageByLabel(*label));
                        }
                    }
                }
            }
        }
        TokenDecision::NeedRecovery(gaps)
    }

    /// Serves a retransmission stimulus from the stored log and ack history.
    pub fn serve_retransmission(
        &self,
        stimulus: &RetransmitStimulus,
    ) -> Result<Vec<RecoveryReply>, ProtocolError> {
        if !self.serving_retransmissions {
            return Err(ProtocolError::NotServing);
        }
        Ok(self.lookup_stimulus(stimulus))
    }

    /// The lookup behind `serve_retransmission`, also used by repair
    /// endpoints and assigned-receiver service where the serving obligation
    /// does not apply.
    pub fn lookup_stimulus(&self, stimulus: &RetransmitStimulus) -> Vec<RecoveryReply> {
        match stimulus {
            RetransmitStimulus::Explicit(items) => {
                let mut replies = Vec::new();
                for item in items {
                    self.lookup_item(*item, &mut replies);
                }
                replies
            }
            RetransmitStimulus::DuplicateSourceMessage(msg) => {
                // an already-acknowledged retransmission means the source
                // missed the covering ack
                match self.committed_seq_of.get(&msg.label()) {
                    Some(g) => self
                        .log
                        .get(g)
                        .and_then(|(_, token)| self.acks_seen.get(token))
                        .map(|a| vec![RecoveryReply::Ack(a.clone())])
                        .unwrap_or_default(),
                    None => Vec::new(),
                }
            }
            RetransmitStimulus::DuplicateTokenPass(ack) => {
                // the predecessor missed the handoff confirmation, which is
                // this node's own following ack
                match self.acks_seen.get(&(ack.token_num + 1)) {
                    Some(mine) if mine.sender == self.id => vec![RecoveryReply::Ack(mine.clone())],
                    _ => Vec::new(),
                }
            }
        }
    }

    fn lookup_item(&self, item: RecoveryItem, replies: &mut Vec<RecoveryReply>) {
        match item {
            RecoveryItem::Ack(t) => self.reply_ack(t, item, replies),
            RecoveryItem::AcksFrom(from) => {
                let to = self.next_token.min(from + ACK_REPLY_SPAN);
                for t in from..to {
                    self.reply_ack(t, RecoveryItem::Ack(t), replies);
                }
            }
            RecoveryItem::MessageByLabel(label) => {
                if let Some(g) = self.committed_seq_of.get(&label) {
                    if *g < self.retention_floor {
                        replies.push(RecoveryReply::NotRetained(item));
                        return;
                    }
                    if let Some((msg, token)) = self.log.get(g) {
                        replies.push(RecoveryReply::Message(msg.clone()));
                        if let Some(a) = self.acks_seen.get(token) {
                            replies.push(RecoveryReply::Ack(a.clone()));
                        }
                    }
                } else if let Some(at) = self.waiting_index.get(&label) {
                    replies.push(RecoveryReply::Message(self.waiting[&(*at, label)].clone()));
                }
            }
            RecoveryItem::MessageBySeq(g) => {
                if g < self.retention_floor {
                    replies.push(RecoveryReply::NotRetained(item));
                    return;
                }
                if let Some((msg, token)) = self.log.get(&g) {
                    replies.push(RecoveryReply::Message(msg.clone()));
                    if let Some(a) = self.acks_seen.get(token) {
                        replies.push(RecoveryReply::Ack(a.clone()));
                    }
                }
            }
        }
    }

    fn reply_ack(&self, t: u64, item: RecoveryItem, replies: &mut Vec<RecoveryReply>) {
        match self.acks_seen.get(&t) {
            Some(a) => {
                // bundle the batch so ack-then-message recovery is one round
                replies.push(RecoveryReply::Ack(a.clone()));
                for label in &a.acked {
                    if let Some(g) = self.committed_seq_of.get(label) {
                        if let Some((msg, _)) = self.log.get(g) {
                            replies.push(RecoveryReply::Message(msg.clone()));
                        }
                    }
                }
            }
            None if t < self.next_token => replies.push(RecoveryReply::NotRetained(item)),
            None => {}
        }
    }

    /// Drops committed state below the given global sequence. Used by repair
    /// endpoints with a bounded retention window.
    pub fn prune_below(&mut self, global_floor: u64) {
        if global_floor <= self.retention_floor {
            return;
        }
        self.retention_floor = global_floor;
        let keep = self.log.split_off(&global_floor);
        for (_, (msg, _)) in std::mem::replace(&mut self.log, keep) {
            self.committed_seq_of.remove(&msg.label());
        }
        let stale: Vec<u64> = self
            .acks_seen
            .iter()
            .filter(|(_, a)| a.base_global_seq + a.batch_len() < global_floor)
            .map(|(t, _)| *t)
            .collect();
        for t in stale {
            self.acks_seen.remove(&t);
        }
    }

    /// Debug check of the state invariants; cheap enough for tests and
    /// simulation assertions after quiescence.
    pub fn check_invariants(&self) {
        for t in 1..self.next_token {
            assert!(self.acks_seen.contains_key(&t) || self.acks_below_retention(t),
                "{}: ack {t} below t_r={} missing", self.id, self.next_token);
        }
        for (t, ack) in &self.acks_seen {
            if *t >= self.next_token {
                continue;
            }
            for (j, label) in ack.acked.iter().enumerate() {
                let g = ack.global_seq_of(j);
                if g >= self.retention_floor {
                    assert!(self.log.contains_key(&g), "{}: global {g} missing", self.id);
                    assert!(self.expected_from(label.0) > label.1);
                }
            }
        }
    }

    fn acks_below_retention(&self, t: u64) -> bool {
        self.retention_floor > 1 && self.acks_seen.keys().next().map_or(true, |first| t < *first)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Effect;

    fn nid(v: u32) -> NodeId {
        NodeId(v)
    }

    fn msg(source: u32, seq: u64) -> SourceMessage {
        SourceMessage {
            source: nid(source),
            source_seq: seq,
            payload: format!("p{source}-{seq}").into_bytes(),
            identity_tag: source as u64,
        }
    }

    fn ack(t: u64, base: u64, acked: Vec<Label>, sender: u32, next: u32) -> AckMessage {
        AckMessage {
            token_num: t,
            timestamp: SimTime(t * 1000),
            sender: nid(sender),
            next_site: nid(next),
            base_global_seq: base,
            acked,
        }
    }

    /// Receiver that has committed tokens 1..=6 covering (A=1) seqs 1..=4
    /// at globals 1..=4, with next_from_source[A] = 5.
    fn receiver_at_t7() -> ReceiverState {
        let mut r = ReceiverState::new(nid(9), 2);
        for (t, seqs) in [(1u64, vec![1u64]), (2, vec![2]), (3, vec![]), (4, vec![3]), (5, vec![4]), (6, vec![])] {
            for s in &seqs {
                assert_eq!(r.on_source_message(msg(1, *s), SimTime(t * 100)), Effect::Stored);
            }
            let base = r.next_global;
            let labels: Vec<Label> = seqs.iter().map(|s| (nid(1), *s)).collect();
            let effect = r.on_ack(ack(t, base, labels, 5, 6));
            assert!(matches!(effect, Effect::Committed(_)), "t={t}: {effect:?}");
        }
        assert_eq!(r.next_token, 7);
        assert_eq!(r.next_from_source[&nid(1)], 5);
        r
    }

    #[test]
    fn source_message_three_way_split() {
        let mut r = receiver_at_t7();
        // below the acknowledged watermark: duplicate
        assert_eq!(r.on_source_message(msg(1, 3), SimTime(999)), Effect::Duplicate);
        // exactly next expected and not stored: stored
        assert_eq!(r.on_source_message(msg(1, 5), SimTime(999)), Effect::Stored);
        // stored copy arriving again: duplicate
        assert_eq!(r.on_source_message(msg(1, 5), SimTime(999)), Effect::Duplicate);
        // per-source gap: the covering ack is missing, request from t_r on
        assert_eq!(
            r.on_source_message(msg(1, 8), SimTime(999)),
            Effect::NeedAck { from: 7, to: None }
        );
        assert!(r.future.contains_key(&(nid(1), 8)));
        // contiguous extension of the store is storable (multi-message batches)
        assert_eq!(r.on_source_message(msg(1, 6), SimTime(1000)), Effect::Stored);
        assert_eq!(r.on_source_message(msg(1, 7), SimTime(1001)), Effect::Stored);
        let ready = r.take_ready_future();
        assert_eq!(ready.len(), 1);
        assert_eq!(r.on_source_message(ready.into_iter().next().unwrap(), SimTime(1002)), Effect::Stored);
    }

    #[test]
    fn ack_expected_commits_batch() {
        let mut r = receiver_at_t7();
        assert_eq!(r.on_source_message(msg(1, 5), SimTime(700)), Effect::Stored);
        assert_eq!(r.on_source_message(msg(2, 1), SimTime(701)), Effect::Stored);
        let g = r.next_global;
        let effect = r.on_ack(ack(7, g, vec![(nid(1), 5), (nid(2), 1)], 6, 7));
        assert_eq!(effect, Effect::Committed(vec![g, g + 1]));
        assert_eq!(r.next_token, 8);
        assert_eq!(r.next_from_source[&nid(1)], 6);
        assert_eq!(r.next_from_source[&nid(2)], 2);
        assert_eq!(r.log[&g].0.label(), (nid(1), 5));
    }

    #[test]
    fn ack_old_is_duplicate() {
        let mut r = receiver_at_t7();
        assert_eq!(r.on_ack(ack(5, 4, vec![(nid(1), 4)], 3, 4)), Effect::Duplicate);
    }

    #[test]
    fn ack_future_is_held_and_gap_requested() {
        let mut r = receiver_at_t7();
        let effect = r.on_ack(ack(9, 7, vec![], 8, 9));
        assert_eq!(effect, Effect::NeedAck { from: 7, to: Some(8) });
        assert!(r.held_acks.contains_key(&9));
        assert_eq!(r.next_token, 7);
    }

    #[test]
    fn ack_with_absent_message_is_held() {
        let mut r = receiver_at_t7();
        let effect = r.on_ack(ack(7, 5, vec![(nid(1), 5)], 6, 7));
        assert_eq!(effect, Effect::NeedMessage(vec![(nid(1), 5)]));
        assert!(r.held_acks.contains_key(&7));
        // recovery delivers the message; the held ack reprocesses cleanly
        assert_eq!(r.on_source_message(msg(1, 5), SimTime(800)), Effect::Stored);
        let held = r.held_acks.get(&7).cloned().unwrap();
        assert_eq!(r.on_ack(held), Effect::Committed(vec![5]));
    }

    #[test]
    fn conflicting_assignment_triggers_reformation() {
        let mut r = receiver_at_t7();
        // token 7 re-assigns (A,4), already committed at global 4, to 5
        let effect = r.on_ack(ack(7, 5, vec![(nid(1), 4)], 6, 7));
        assert_eq!(
            effect,
            Effect::TriggerReformation(Corruption::ConflictingAssignment {
                label: (nid(1), 4),
                committed_at: 4,
                acked_at: 5,
            })
        );
    }

    #[test]
    fn base_mismatch_triggers_reformation() {
        let mut r = receiver_at_t7();
        let effect = r.on_ack(ack(7, 9, vec![], 6, 7));
        assert_eq!(
            effect,
            Effect::TriggerReformation(Corruption::BaseMismatch { expected: 5, got: 9 })
        );
    }

    #[test]
    fn emit_drains_in_arrival_order_up_to_cap() {
        let mut r = receiver_at_t7();
        r.holds_token = true;
        for seq in 5..=9 {
            assert_eq!(r.on_source_message(msg(1, seq), SimTime(700 + seq)), Effect::Stored);
        }
        let ack = r.emit_ack(SimTime(1000), 100, nid(10)).unwrap();
        assert_eq!(ack.token_num, 7);
        assert_eq!(ack.base_global_seq, 5);
        assert_eq!(ack.acked, (5..=9).map(|q| (nid(1), q)).collect::<Vec<_>>());
        assert!(!r.holds_token);
        assert!(r.serving_retransmissions);
        assert_eq!(r.next_token, 8);
        assert_eq!(r.next_global, 10);
        // emitter committed its own batch
        assert_eq!(r.log[&5].0.label(), (nid(1), 5));
    }

    #[test]
    fn emit_pure_token_pass_when_idle() {
        let mut r = receiver_at_t7();
        r.holds_token = true;
        let ack = r.emit_ack(SimTime(1000), 100, nid(10)).unwrap();
        assert_eq!(ack.batch_len(), 0);
        assert_eq!(ack.base_global_seq, 5);
        assert_eq!(r.next_global, 5);
    }

    #[test]
    fn emit_respects_cap_and_leaves_remainder() {
        let mut r = ReceiverState::new(nid(0), 0);
        r.holds_token = true;
        for seq in 1..=150 {
            assert_eq!(r.on_source_message(msg(1, seq), SimTime(seq)), Effect::Stored);
        }
        let ack = r.emit_ack(SimTime(1000), 100, nid(1)).unwrap();
        assert_eq!(ack.batch_len(), 100);
        assert_eq!(r.waiting_len(), 50);
    }

    #[test]
    fn emit_without_token_rejected() {
        let mut r = receiver_at_t7();
        assert_eq!(r.emit_ack(SimTime(1), 10, nid(1)), Err(ProtocolError::NotTokenHolder));
    }

    #[test]
    fn arrival_order_ties_break_by_label() {
        let mut r = ReceiverState::new(nid(0), 0);
        r.holds_token = true;
        // same arrival instant: label order decides
        assert_eq!(r.on_source_message(msg(2, 1), SimTime(100)), Effect::Stored);
        assert_eq!(r.on_source_message(msg(1, 1), SimTime(100)), Effect::Stored);
        let ack = r.emit_ack(SimTime(200), 10, nid(1)).unwrap();
        assert_eq!(ack.acked, vec![(nid(1), 1), (nid(2), 1)]);
    }

    #[test]
    fn accept_token_when_complete() {
        let mut r = receiver_at_t7();
        let handoff = ack(6, 5, vec![], 5, 9);
        assert_eq!(r.accept_token(&handoff), TokenDecision::Accepted);
        assert!(r.holds_token);
        assert!(r.serving_retransmissions);
    }

    #[test]
    fn accept_token_lists_missing_message() {
        let mut r = receiver_at_t7();
        // ack 7 held, its message (B=2, 12)... use source 2 seq 1 as the gap
        assert_eq!(
            r.on_ack(ack(7, 5, vec![(nid(2), 1)], 6, 9)),
            Effect::NeedMessage(vec![(nid(2), 1)])
        );
        let handoff = r.held_acks.get(&7).cloned().unwrap();
        assert_eq!(
            r.accept_token(&handoff),
            TokenDecision::NeedRecovery(vec![RecoveryItem::MessageByLabel((nid(2), 1))])
        );
        assert!(!r.holds_token);
    }

    #[test]
    fn accept_token_lists_missing_ack_and_messages() {
        let mut r = receiver_at_t7();
        // ack 8 arrives naming us next site; ack 7 never seen
        assert_eq!(
            r.on_ack(ack(8, 6, vec![(nid(2), 2)], 7, 9)),
            Effect::NeedAck { from: 7, to: Some(7) }
        );
        let handoff = r.held_acks.get(&8).cloned().unwrap();
        assert_eq!(
            r.accept_token(&handoff),
            TokenDecision::NeedRecovery(vec![
                RecoveryItem::Ack(7),
                RecoveryItem::MessageByLabel((nid(2), 2)),
            ])
        );
    }

    #[test]
    fn serve_explicit_request_bundles_message_and_ack() {
        let mut r = receiver_at_t7();
        r.serving_retransmissions = true;
        let replies = r
            .serve_retransmission(&RetransmitStimulus::Explicit(vec![RecoveryItem::MessageBySeq(4)]))
            .unwrap();
        assert_eq!(replies.len(), 2);
        assert!(matches!(&replies[0], RecoveryReply::Message(m) if m.label() == (nid(1), 4)));
        assert!(matches!(&replies[1], RecoveryReply::Ack(a) if a.token_num == 5));
    }

    #[test]
    fn duplicate_source_answers_with_covering_ack() {
        let mut r = receiver_at_t7();
        r.serving_retransmissions = true;
        let replies = r
            .serve_retransmission(&RetransmitStimulus::DuplicateSourceMessage(msg(1, 4)))
            .unwrap();
        assert_eq!(replies.len(), 1);
        assert!(matches!(&replies[0], RecoveryReply::Ack(a) if a.token_num == 5));
    }

    #[test]
    fn duplicate_token_pass_answers_with_own_next_ack() {
        let mut r = receiver_at_t7();
        r.holds_token = true;
        let mine = r.emit_ack(SimTime(900), 10, nid(10)).unwrap();
        assert_eq!(mine.token_num, 7);
        // predecessor repeats ack 6: reply with our ack 7
        let replies = r
            .serve_retransmission(&RetransmitStimulus::DuplicateTokenPass(ack(6, 5, vec![], 5, 9)))
            .unwrap();
        assert_eq!(replies.len(), 1);
        assert!(matches!(&replies[0], RecoveryReply::Ack(a) if a.token_num == 7 && a.sender == nid(9)));
    }

    #[test]
    fn not_serving_is_rejected() {
        let r = receiver_at_t7();
        assert_eq!(
            r.serve_retransmission(&RetransmitStimulus::Explicit(vec![])),
            Err(ProtocolError::NotServing)
        );
    }

    #[test]
    fn retention_floor_reports_not_retained() {
        let mut r = receiver_at_t7();
        r.prune_below(4);
        r.serving_retransmissions = true;
        let replies = r
            .serve_retransmission(&RetransmitStimulus::Explicit(vec![
                RecoveryItem::MessageBySeq(2),
                RecoveryItem::MessageBySeq(4),
            ]))
            .unwrap();
        assert!(matches!(&replies[0], RecoveryReply::NotRetained(RecoveryItem::MessageBySeq(2))));
        assert!(matches!(&replies[1], RecoveryReply::Message(_)));
    }

    #[test]
    fn invariants_hold_after_activity() {
        let r = receiver_at_t7();
        r.check_invariants();
    }
}
