//! The receiver pipeline shared by primaries, secondaries and repair
//! endpoints: ack/message processing with held-ack reprocessing, gap
//! detection against the token schedule, and recovery requests.

use super::messages::{batch_hash, labels_to_str, Action, RunCfg, TimerTag};
use super::recovery::{Pending, ReportClient, RequestTable};
use crate::nack::wave_index;
use crate::protocol::{
    AckMessage, Corruption, Effect, NodeId, ReceiverState, RecoveryItem, RecoveryReply,
    SourceMessage,
};
use crate::reformation::{FailureEvidence, FailureReason, FailureReport};
use crate::simnet::trace::{kind, TraceRecord};
use crate::time::SimTime;

/// A node's view of the primary ring and the current token schedule epoch.
#[derive(Debug, Clone)]
pub struct RingView {
    pub members: Vec<NodeId>,
    pub epoch: SimTime,
    /// First token of this epoch; `sched(base)` is one period past `epoch`.
    pub base: u64,
    /// Ring position of the site that emits token `base`.
    pub site0_pos: usize,
}

impl RingView {
    pub fn m(&self) -> usize {
        self.members.len()
    }

    pub fn pos_of(&self, id: NodeId) -> Option<usize> {
        self.members.iter().position(|n| *n == id)
    }

    pub fn sched(&self, token: u64, cfg: &RunCfg) -> SimTime {
        let steps = token.max(self.base) - self.base + 1;
        self.epoch + cfg.tau_t() * steps
    }

    pub fn emitter_pos(&self, token: u64) -> usize {
        let steps = (token.max(self.base) - self.base) as usize;
        (self.site0_pos + steps) % self.m().max(1)
    }

    pub fn emitter(&self, token: u64) -> NodeId {
        self.members[self.emitter_pos(token)]
    }

    pub fn successor(&self, pos: usize) -> NodeId {
        self.members[(pos + 1) % self.m()]
    }
}

/// One committed acknowledgement, handed to the owning node for releases and
/// application replay.
#[derive(Debug, Clone)]
pub struct CommittedAck {
    pub ack: AckMessage,
    pub globals: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct ReceiverCore {
    pub me: NodeId,
    pub rs: ReceiverState,
    pub table: RequestTable,
    pub report: ReportClient,
    pub ring: RingView,
    pub highest_seen: u64,
    /// NACK-wave gating applies only to primary-ring members.
    pub nack_gated: bool,
    /// Recovery always goes here when set (assigned repair endpoint or
    /// colocated host); primaries address the serving site instead.
    pub fixed_target: Option<NodeId>,
    watchdog_armed: Option<(u64, SimTime)>,
}

impl ReceiverCore {
    pub fn new(me: NodeId, ring: RingView, nack_gated: bool, fixed_target: Option<NodeId>) -> Self {
        let pos = ring.pos_of(me).unwrap_or(0);
        ReceiverCore {
            me,
            rs: ReceiverState::new(me, pos),
            table: RequestTable::default(),
            report: ReportClient::default(),
            ring,
            highest_seen: 0,
            nack_gated,
            fixed_target,
            watchdog_armed: None,
        }
    }

    pub fn name<'c>(&self, cfg: &'c RunCfg) -> &'c str {
        cfg.name(self.me)
    }

    /// Who to ask when acknowledgements are missing: the fixed repair
    /// target if any, otherwise the scheduled emitter of the missing token
    /// (the serving site for that handoff).
    pub fn recovery_target(&self, missing_token: u64) -> NodeId {
        if let Some(t) = self.fixed_target {
            return t;
        }
        let emitter = self.ring.emitter(missing_token);
        if emitter == self.me {
            // our own emission is stalled on the previous handoff
            let pos = self.ring.pos_of(self.me).unwrap_or(0);
            self.ring.members[(pos + self.ring.m() - 1) % self.ring.m()]
        } else {
            emitter
        }
    }

    fn eligible_token_for(&self, covering_token: u64, cfg: &RunCfg) -> u64 {
        if !self.nack_gated || cfg.k_p <= 1 {
            return 0;
        }
        let m = self.ring.m();
        let Some(pos) = self.ring.pos_of(self.me) else {
            return 0;
        };
        let k_p = cfg.k_p.min(m);
        let i = wave_index(pos, self.ring.emitter_pos(covering_token), m, k_p);
        covering_token + i as u64
    }

    pub fn request_items(
        &mut self,
        items: Vec<RecoveryItem>,
        target: NodeId,
        covering_token: u64,
        now: SimTime,
        cfg: &RunCfg,
    ) {
        for item in items {
            if self.table.contains(&item) {
                continue;
            }
            if let RecoveryItem::AcksFrom(f) = item {
                if self.table.covers_acks_from(f) {
                    continue;
                }
            }
            let eligible_at_token = match item {
                RecoveryItem::MessageByLabel(_) | RecoveryItem::MessageBySeq(_) => {
                    self.eligible_token_for(covering_token, cfg)
                }
                // an acknowledgement can only be requested once its
                // scheduled emission has passed (or it was overheard)
                RecoveryItem::Ack(t) | RecoveryItem::AcksFrom(t) => t,
            };
            self.table.insert(Pending {
                item,
                target,
                attempts: 0,
                next_retry: now,
                eligible_at_token,
                sent_once: false,
                covering_token,
            });
        }
    }

    /// Sends due requests and escalates exhausted ones into a failure
    /// report.
    pub fn pump_requests(&mut self, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let ring = self.ring.clone();
        let highest = self.highest_seen;
        let me = self.me;
        let exhausted = self.table.pump(
            me,
            now,
            highest,
            |tok| now >= ring.sched(tok, cfg) + cfg.delta_n(),
            cfg,
            out,
        );
        if let Some((reason, evidence)) = exhausted {
            self.file_report(reason, evidence, now, cfg, out);
        }
    }

    pub fn file_report(
        &mut self,
        reason: FailureReason,
        evidence: FailureEvidence,
        now: SimTime,
        cfg: &RunCfg,
        out: &mut Vec<Action>,
    ) {
        let report = FailureReport { reporter: self.me, reason, evidence };
        self.report.file(self.me, report, now, cfg, out);
    }

    /// Handles an arriving source message. Returns true when it was stored
    /// (callers drive suppression and secondary gating off storage).
    pub fn deliver_source(
        &mut self,
        msg: SourceMessage,
        now: SimTime,
        cfg: &RunCfg,
        committed: &mut Vec<CommittedAck>,
        out: &mut Vec<Action>,
    ) -> bool {
        let label = msg.label();
        let effect = self.rs.on_source_message(msg, now);
        let mut stored = false;
        match effect {
            Effect::Stored => {
                stored = true;
                self.table.cancel_label(&label);
            }
            Effect::Duplicate => {}
            Effect::NeedAck { from, .. } => {
                let target = self.recovery_target(from);
                self.request_items(vec![RecoveryItem::AcksFrom(from)], target, from, now, cfg);
            }
            _ => unreachable!("source messages only store, dup or gap"),
        }
        self.pump_held(now, cfg, committed, out);
        self.pump_requests(now, cfg, out);
        stored
    }

    /// Handles an arriving acknowledgement.
    pub fn deliver_ack(
        &mut self,
        a: AckMessage,
        now: SimTime,
        cfg: &RunCfg,
        committed: &mut Vec<CommittedAck>,
        out: &mut Vec<Action>,
    ) {
        self.note_seen(a.token_num);
        let effect = self.rs.on_ack(a.clone());
        self.on_ack_effect(&a, effect, now, cfg, committed, out);
        self.pump_held(now, cfg, committed, out);
        self.pump_requests(now, cfg, out);
    }

    pub fn note_seen(&mut self, token: u64) {
        self.highest_seen = self.highest_seen.max(token);
    }

    fn on_ack_effect(
        &mut self,
        a: &AckMessage,
        effect: Effect,
        now: SimTime,
        cfg: &RunCfg,
        committed: &mut Vec<CommittedAck>,
        out: &mut Vec<Action>,
    ) {
        match effect {
            Effect::Committed(globals) => {
                self.trace_commit(a, now, cfg, out);
                committed.push(CommittedAck { ack: a.clone(), globals });
                self.after_progress(now);
            }
            Effect::Duplicate => {}
            Effect::NeedAck { from, .. } => {
                let target = if a.sender == self.me { self.recovery_target(from) } else { a.sender };
                let target = self.fixed_target.unwrap_or(target);
                self.request_items(vec![RecoveryItem::AcksFrom(from)], target, from, now, cfg);
            }
            Effect::NeedMessage(labels) => {
                let target = self.fixed_target.unwrap_or(a.sender);
                let items = labels.into_iter().map(RecoveryItem::MessageByLabel).collect();
                self.request_items(items, target, a.token_num, now, cfg);
            }
            Effect::TriggerReformation(c) => {
                let evidence = match c {
                    Corruption::ConflictingAssignment { label, .. } => FailureEvidence::Message(label),
                    Corruption::BaseMismatch { .. } => FailureEvidence::Token(a.token_num),
                };
                self.file_report(FailureReason::UnrecoverableGap, evidence, now, cfg, out);
            }
            Effect::Stored => unreachable!("acks never store"),
        }
    }

    /// Reprocesses ready out-of-order messages and held acks until no more
    /// progress is possible.
    pub fn pump_held(
        &mut self,
        now: SimTime,
        cfg: &RunCfg,
        committed: &mut Vec<CommittedAck>,
        out: &mut Vec<Action>,
    ) {
        loop {
            let mut progressed = false;
            for msg in self.rs.take_ready_future() {
                let label = msg.label();
                if matches!(self.rs.on_source_message(msg, now), Effect::Stored) {
                    self.table.cancel_label(&label);
                    progressed = true;
                }
            }
            while let Some(a) = self.rs.held_acks.get(&self.rs.next_token).cloned() {
                let effect = self.rs.on_ack(a.clone());
                let was_commit = matches!(effect, Effect::Committed(_));
                self.on_ack_effect(&a, effect, now, cfg, committed, out);
                if !was_commit {
                    break;
                }
                progressed = true;
            }
            if !progressed {
                return;
            }
        }
    }

    /// Drops pending requests the latest protocol progress satisfied.
    pub fn after_progress(&mut self, _now: SimTime) {
        let next = self.rs.next_token;
        let rs = &self.rs;
        self.table.cancel_satisfied(
            next,
            |l| rs.waiting_contains(l) || rs.committed_seq(l).is_some(),
            |g| rs.log.contains_key(&g),
        );
    }

    /// Feeds retransmitted items: messages first, then acks in token order.
    pub fn deliver_replies(
        &mut self,
        items: Vec<RecoveryReply>,
        now: SimTime,
        cfg: &RunCfg,
        committed: &mut Vec<CommittedAck>,
        out: &mut Vec<Action>,
    ) {
        let mut msgs = Vec::new();
        let mut acks = Vec::new();
        for item in items {
            match item {
                RecoveryReply::Message(m) => msgs.push(m),
                RecoveryReply::Ack(a) => acks.push(a),
                RecoveryReply::NotRetained(_) => {}
            }
        }
        acks.sort_by_key(|a| a.token_num);
        for m in msgs {
            let label = m.label();
            if matches!(self.rs.on_source_message(m, now), Effect::Stored) {
                self.table.cancel_label(&label);
            }
        }
        for a in acks {
            self.note_seen(a.token_num);
            if self.table.contains(&RecoveryItem::Ack(a.token_num)) || a.token_num >= self.rs.next_token {
                let effect = self.rs.on_ack(a.clone());
                self.on_ack_effect(&a, effect, now, cfg, committed, out);
            }
        }
        self.pump_held(now, cfg, committed, out);
        self.pump_requests(now, cfg, out);
    }

    pub fn trace_commit(&self, a: &AckMessage, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        out.push(Action::Trace(
            TraceRecord::new(now, self.name(cfg), kind::COMMIT)
                .field("token", a.token_num)
                .field("base", a.base_global_seq)
                .field("k", a.batch_len())
                .field("bh", batch_hash(a.base_global_seq, &a.acked)),
        ));
    }

    pub fn trace_emit(&self, a: &AckMessage, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        out.push(Action::Trace(
            TraceRecord::new(now, self.name(cfg), kind::EMIT)
                .field("token", a.token_num)
                .field("base", a.base_global_seq)
                .field("k", a.batch_len())
                .field("ts", a.timestamp)
                .field("next", cfg.name(a.next_site))
                .field("bh", batch_hash(a.base_global_seq, &a.acked))
                .field("labels", labels_to_str(&a.acked, &cfg.names)),
        ));
    }

    /// Arms the deadline watchdog for the next expected token. Re-arming
    /// for the same deadline is a no-op so watchdog fires never stack.
    pub fn arm_watchdog(&mut self, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let token = self.rs.next_token;
        let at = (self.ring.sched(token, cfg) + cfg.delta_n()).max(now);
        if self.watchdog_armed == Some((token, at)) {
            return;
        }
        self.watchdog_armed = Some((token, at));
        out.push(Action::Timer(at, TimerTag::AckWatchdog { token }));
    }

    /// Default watchdog behavior: the expected acknowledgement never
    /// arrived, so request everything from it forward.
    pub fn watchdog_request(&mut self, token: u64, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if self.rs.next_token != token || self.rs.held_acks.contains_key(&token) {
            return;
        }
        let target = self.recovery_target(token);
        self.request_items(vec![RecoveryItem::AcksFrom(token)], target, token, now, cfg);
        self.pump_requests(now, cfg, out);
    }

    /// Whether the node has fully caught up and nothing is outstanding.
    pub fn quiet(&self) -> bool {
        self.rs.waiting_len() == 0
            && self.rs.held_acks.is_empty()
            && self.rs.future.is_empty()
            && self.table.is_empty()
            && self.report.idle()
    }
}
