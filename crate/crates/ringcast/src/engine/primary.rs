//! Primary receiver (R_P): the full protocol participant. Rotates the
//! token, emits batched acknowledgements on schedule, serves
//! retransmissions while it is the last handoff, releases committed batches
//! after the fair-delivery delay, and arbitrates trades when the scenario
//! runs the trading floor.

use super::core::{CommittedAck, ReceiverCore, RingView};
use super::messages::{item_to_str, Action, NewRingMsg, ReleasedRecord, RunCfg, TimerTag, Wire};
use super::secmember::SecMember;
use crate::apps::book::{Applied, Fill, OrderBook};
use crate::apps::floor::{ArbiterLog, TradeEvent};
use crate::apps::{AppKind, AppRecord};
use crate::protocol::{
    AckMessage, NodeId, RecoveryItem, RetransmitStimulus, SourceMessage, TokenDecision,
};
use crate::reformation::{FailureEvidence, FailureReason};
use crate::simnet::trace::{kind, TraceRecord};
use crate::simnet::{fnv1a, LossKey};
use crate::time::SimTime;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct PrimaryNode {
    pub core: ReceiverCore,
    /// Clock skew applied to emitted timestamps and local release times.
    pub skew_us: i64,
    pub has_region: bool,
    pub pending_handoff: Option<AckMessage>,
    handoff_attempts: u32,
    last_handoff_fire: Option<SimTime>,
    /// Tokens committed but not yet released, with their local release time.
    release_backlog: BTreeMap<u64, SimTime>,
    pub released_through: u64,
    pub release_hash: u64,
    /// Join handshake in flight: (server, round, attempts).
    join_job: Option<(NodeId, u64, u32)>,
    adopted_round: u64,
    /// Whether this node is a member of the current ring.
    pub in_ring: bool,
    // trading floor state
    pub book: OrderBook,
    replay_next: u64,
    pub arbiter: ArbiterLog,
    pub sec: Option<SecMember>,
    /// Items retransmitted recently: item -> (time, count), for duplicate
    /// accounting and multicast dedup.
    served_recently: BTreeMap<String, (SimTime, u64)>,
}

impl PrimaryNode {
    pub fn new(me: NodeId, ring: RingView, skew_us: i64, has_region: bool, sec: Option<SecMember>) -> Self {
        let in_ring = ring.pos_of(me).is_some();
        PrimaryNode {
            core: ReceiverCore::new(me, ring, true, None),
            skew_us,
            has_region,
            pending_handoff: None,
            handoff_attempts: 0,
            last_handoff_fire: None,
            release_backlog: BTreeMap::new(),
            released_through: 0,
            release_hash: 0,
            join_job: None,
            adopted_round: 0,
            in_ring,
            book: OrderBook::new(),
            replay_next: 1,
            arbiter: ArbiterLog::default(),
            sec: None.or(sec),
            served_recently: BTreeMap::new(),
        }
    }

    fn local(&self, now: SimTime) -> SimTime {
        SimTime((now.0 as i64 + self.skew_us).max(0) as u64)
    }

    fn from_local(&self, local: SimTime) -> SimTime {
        SimTime((local.0 as i64 - self.skew_us).max(0) as u64)
    }

    pub fn me(&self) -> NodeId {
        self.core.me
    }

    pub fn quiet(&self) -> bool {
        self.core.quiet() && self.release_backlog.is_empty() && self.join_job.is_none()
    }

    /// Initial timers: the appointed first site holds the token from the
    /// start; everyone watches the schedule.
    pub fn start(&mut self, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if self.in_ring && self.core.ring.emitter(self.core.ring.base) == self.me() {
            self.core.rs.holds_token = true;
            self.core.rs.serving_retransmissions = true;
            out.push(Action::Timer(
                self.core.ring.sched(self.core.ring.base, cfg),
                TimerTag::TokenEmit { token: self.core.ring.base },
            ));
        }
        self.core.arm_watchdog(now, cfg, out);
        if let Some(sec) = &mut self.sec {
            sec.start(&self.core.rs, self.core.me, now, cfg, out);
        }
    }

    pub fn on_deliver(&mut self, wire: Wire, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        match wire {
            Wire::Source(msg) => self.on_source(msg, now, cfg, out),
            Wire::Ack(a) => self.on_ack(a, now, cfg, out),
            Wire::Request { from, items } => self.on_request(from, items, now, cfg, out),
            Wire::Replies { items } | Wire::Retrans { items } => {
                let mut committed = Vec::new();
                self.core.deliver_replies(items, now, cfg, &mut committed, out);
                self.after_commits(committed, now, cfg, out);
            }
            Wire::Invitation { xr, round } => self.on_invitation(xr, round, now, cfg, out),
            Wire::JoinAck { round } => {
                if matches!(self.join_job, Some((_, r, _)) if r == round) {
                    self.join_job = None;
                }
            }
            Wire::NewRing(nr) => self.adopt_ring(nr, now, cfg, out),
            Wire::ReportAck => self.core.report.on_ack(),
            Wire::SecToken { ring, n, from } => {
                out.push(Action::Unicast(from, Wire::SecTokenAck { ring, n }));
                if let Some(sec) = &mut self.sec {
                    sec.on_token(n, &self.core.rs, self.core.me, now, cfg, out);
                    let gaps = sec.take_gaps();
                    self.request_sec_gaps(gaps, now, cfg, out);
                }
            }
            Wire::SecTokenAck { n, .. } => {
                if let Some(sec) = &mut self.sec {
                    sec.on_hop_ack(n);
                }
            }
            Wire::SecRing(update) => {
                if let Some(sec) = &mut self.sec {
                    sec.adopt(update, self.core.me);
                }
            }
            _ => {}
        }
    }

    pub fn on_timer(&mut self, tag: TimerTag, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        match tag {
            TimerTag::TokenEmit { token } => self.on_token_emit(token, now, cfg, out),
            TimerTag::AckWatchdog { token } => self.on_watchdog(token, now, cfg, out),
            TimerTag::RequestRetry => {
                self.core.pump_requests(now, cfg, out);
                self.pump(now, cfg, out);
            }
            TimerTag::Release { token } => self.on_release(token, now, cfg, out),
            TimerTag::ReportRetry => {
                let me = self.me();
                self.core.report.on_retry(me, now, cfg, out);
            }
            TimerTag::JoinRetry { round } => {
                if let Some((xr, r, attempts)) = &mut self.join_job {
                    if *r == round {
                        *attempts += 1;
                        if *attempts <= cfg.k_r() {
                            let t_r = self.core.rs.next_token;
                            out.push(Action::Unicast(
                                *xr,
                                Wire::Join { from: self.core.me, t_r, round },
                            ));
                            out.push(Action::Timer(now + cfg.tau_r(), TimerTag::JoinRetry { round }));
                        } else {
                            self.join_job = None;
                        }
                    }
                }
            }
            TimerTag::SecRetry { n } => {
                if let Some(sec) = &mut self.sec {
                    sec.on_retry(n, self.core.me, now, cfg, out);
                    if let Some(evidence) = sec.take_failure() {
                        self.core
                            .file_report(FailureReason::TokenNotPassed, evidence, now, cfg, out);
                    }
                }
            }
            _ => {}
        }
    }

    // ------------------------------------------------------------------
    // protocol inputs

    fn on_source(&mut self, msg: SourceMessage, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let label = msg.label();
        let already_committed = self.core.rs.committed_seq(&label).is_some();
        let mut committed = Vec::new();
        let stored = self.core.deliver_source(msg.clone(), now, cfg, &mut committed, out);
        if !stored && already_committed && self.core.rs.serving_retransmissions {
            // implicit request: the source missed the covering ack
            if let Ok(replies) = self
                .core
                .rs
                .serve_retransmission(&RetransmitStimulus::DuplicateSourceMessage(msg.clone()))
            {
                if !replies.is_empty() {
                    out.push(Action::Trace(
                        TraceRecord::new(now, self.core.name(cfg), kind::RETRANS)
                            .field("item", format!("src:{}:{}", cfg.name(label.0), label.1))
                            .field("mode", "u"),
                    ));
                    out.push(Action::Unicast(msg.source, Wire::Replies { items: replies }));
                }
            }
        }
        self.after_commits(committed, now, cfg, out);
        self.pump(now, cfg, out);
    }

    fn on_ack(&mut self, a: AckMessage, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let dup = a.token_num < self.core.rs.next_token;
        if a.next_site == self.core.me && a.token_num >= self.core.rs.next_token.saturating_sub(1) {
            self.pending_handoff = Some(a.clone());
        }
        if dup {
            // a repeated token pass means the predecessor missed our own
            // following ack
            if a.next_site == self.core.me {
                let replies = self
                    .core
                    .rs
                    .lookup_stimulus(&RetransmitStimulus::DuplicateTokenPass(a.clone()));
                if !replies.is_empty() {
                    out.push(Action::Trace(
                        TraceRecord::new(now, self.core.name(cfg), kind::RETRANS)
                            .field("item", format!("a{}", a.token_num + 1))
                            .field("mode", "u"),
                    ));
                    out.push(Action::Unicast(a.sender, Wire::Replies { items: replies }));
                }
            }
            return;
        }
        let mut committed = Vec::new();
        self.core.deliver_ack(a, now, cfg, &mut committed, out);
        self.after_commits(committed, now, cfg, out);
        self.pump(now, cfg, out);
    }

    fn on_request(&mut self, from: NodeId, items: Vec<RecoveryItem>, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        // the serving obligation belongs to the last handoff, but any
        // primary answers from its log when addressed directly
        let replies = if self.core.rs.serving_retransmissions {
            self.core
                .rs
                .serve_retransmission(&RetransmitStimulus::Explicit(items.clone()))
                .unwrap_or_default()
        } else {
            self.core.rs.lookup_stimulus(&RetransmitStimulus::Explicit(items.clone()))
        };
        if replies.is_empty() {
            return;
        }
        let mut dup = false;
        for item in &items {
            let key = item_to_str(item, &cfg.names);
            let entry = self.served_recently.entry(key.clone()).or_insert((now, 0));
            if now.0.saturating_sub(entry.0 .0) < cfg.tau_r().0 && entry.1 > 0 {
                dup = true;
                out.push(Action::Trace(
                    TraceRecord::new(now, self.core.name(cfg), kind::DUP_REQUEST).field("item", key),
                ));
            }
            *entry = (now, entry.1 + 1);
        }
        let rendered = items
            .iter()
            .map(|i| item_to_str(i, &cfg.names))
            .collect::<Vec<_>>()
            .join(",");
        if cfg.nack_enabled {
            // suppression mode: retransmissions go to the whole group
            if !dup {
                out.push(Action::Trace(
                    TraceRecord::new(now, self.core.name(cfg), kind::RETRANS)
                        .field("item", rendered)
                        .field("mode", "m"),
                ));
                let serve_no = self.served_recently.get(&item_to_str(&items[0], &cfg.names)).map(|e| e.1).unwrap_or(1);
                out.push(Action::Multicast(
                    Wire::Retrans { items: replies },
                    LossKey { class: 3, a: fnv1a(self.core.name(cfg).as_bytes()), b: serve_no, c: items.len() as u64 },
                ));
            }
        } else {
            out.push(Action::Trace(
                TraceRecord::new(now, self.core.name(cfg), kind::RETRANS)
                    .field("item", rendered)
                    .field("mode", "u"),
            ));
            out.push(Action::Unicast(from, Wire::Replies { items: replies }));
        }
    }

    // ------------------------------------------------------------------
    // token machinery

    fn on_token_emit(&mut self, token: u64, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if !self.core.rs.holds_token || self.core.rs.next_token != token || !self.in_ring {
            return;
        }
        let pos = self.core.ring.pos_of(self.core.me).expect("in ring");
        let next_site = self.core.ring.successor(pos);
        let stamp = self.local(now);
        let ack = self
            .core
            .rs
            .emit_ack(stamp, cfg.k_cap, next_site)
            .expect("holder emits");
        self.core.note_seen(token);
        self.core.after_progress(now);
        self.handoff_attempts = 0;
        self.core.trace_emit(&ack, now, cfg, out);
        self.core.trace_commit(&ack, now, cfg, out);
        out.push(Action::Multicast(
            Wire::Ack(ack.clone()),
            LossKey { class: 2, a: ack.token_num, b: 0, c: 0 },
        ));
        // the emitter's own batch: releases plus the arbiter role
        let fills = self.apply_batch_to_book(&ack, cfg);
        if cfg.app == AppKind::Floor {
            let tentative = self.arbiter.report_tentative(fills, token);
            for ev in &tentative {
                out.push(trade_record(kind::TRADE_TENTATIVE, self.core.name(cfg), now, ev, cfg));
            }
            let confirmed = self.arbiter.confirm_through(token, self.core.ring.m());
            for ev in &confirmed {
                out.push(trade_record(kind::TRADE_CONFIRMED, self.core.name(cfg), now, ev, cfg));
            }
        }
        self.schedule_release(&ack, now, cfg, out);
        if ack.next_site == self.core.me {
            // degenerate single-site ring: the token returns immediately
            self.pending_handoff = Some(ack);
        }
        self.core.arm_watchdog(now, cfg, out);
        self.pump(now, cfg, out);
    }

    fn on_watchdog(&mut self, token: u64, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if self.core.rs.next_token != token || self.core.rs.holds_token || !self.in_ring {
            return;
        }
        if self.core.rs.held_acks.contains_key(&token) {
            return; // the ack arrived; message recovery is in flight
        }
        if self.core.rs.last_emitted == Some(token.saturating_sub(1))
            && self.core.rs.serving_retransmissions
            && token > 1
        {
            // our successor is silent: repeat the token passing message,
            // one attempt per retry interval no matter how many timers land
            if self.last_handoff_fire.is_some_and(|t| now.0 - t.0 < cfg.tau_r().0) {
                return;
            }
            self.last_handoff_fire = Some(now);
            self.handoff_attempts += 1;
            if self.handoff_attempts > cfg.k_r() {
                self.core.file_report(
                    FailureReason::TokenNotPassed,
                    FailureEvidence::Token(token),
                    now,
                    cfg,
                    out,
                );
                return;
            }
            if let Some(prev) = self.core.rs.acks_seen.get(&(token - 1)).cloned() {
                out.push(Action::Trace(
                    TraceRecord::new(now, self.core.name(cfg), kind::RETRANS)
                        .field("item", format!("a{}", token - 1))
                        .field("mode", "m"),
                ));
                out.push(Action::Multicast(
                    Wire::Ack(prev),
                    LossKey { class: 2, a: token - 1, b: self.handoff_attempts as u64, c: 0 },
                ));
            }
            out.push(Action::Timer(now + cfg.tau_r(), TimerTag::AckWatchdog { token }));
            return;
        }
        self.core.watchdog_request(token, now, cfg, out);
    }

    /// Tries to accept a pending handoff, then keeps request retries alive.
    fn pump(&mut self, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if let Some(h) = self.pending_handoff.clone() {
            if !self.in_ring || h.next_site != self.core.me {
                self.pending_handoff = None;
            } else if !self.core.rs.holds_token {
                match self.core.rs.accept_token(&h) {
                    TokenDecision::Accepted => {
                        self.pending_handoff = None;
                        out.push(Action::Trace(
                            TraceRecord::new(now, self.core.name(cfg), kind::ACCEPT)
                                .field("token", h.token_num),
                        ));
                        let next = h.token_num + 1;
                        let at = self.core.ring.sched(next, cfg).max(now);
                        out.push(Action::Timer(at, TimerTag::TokenEmit { token: next }));
                    }
                    TokenDecision::NeedRecovery(gaps) => {
                        // recover from the previous site before retrying
                        self.core.request_items(gaps, h.sender, h.token_num, now, cfg);
                        self.core.pump_requests(now, cfg, out);
                    }
                }
            }
        }
        self.pump_sec(now, cfg, out);
    }

    fn pump_sec(&mut self, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if let Some(sec) = &mut self.sec {
            sec.try_pass(&self.core.rs, self.core.me, now, cfg, out);
            let gaps = sec.take_gaps();
            self.request_sec_gaps(gaps, now, cfg, out);
        }
    }

    fn request_sec_gaps(&mut self, gaps: Vec<RecoveryItem>, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if gaps.is_empty() {
            return;
        }
        // the bridge is a ring member: ordinary recovery machinery applies
        let token = self.core.rs.next_token;
        let target = self.core.recovery_target(token);
        self.core.request_items(gaps, target, token, now, cfg);
        self.core.pump_requests(now, cfg, out);
    }

    // ------------------------------------------------------------------
    // commits, releases, replay

    fn after_commits(&mut self, committed: Vec<CommittedAck>, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        for c in committed {
            if c.ack.next_site == self.core.me {
                self.pending_handoff = Some(c.ack.clone());
            }
            self.apply_batch_to_book(&c.ack, cfg);
            self.schedule_release(&c.ack, now, cfg, out);
        }
        self.update_serving();
        self.core.arm_watchdog(now, cfg, out);
        self.pump(now, cfg, out);
    }

    /// The handoff confirmation: receiving the successor's own ack (held or
    /// committed) ends the serving obligation.
    fn update_serving(&mut self) {
        if let Some(te) = self.core.rs.last_emitted {
            if self.core.rs.serving_retransmissions
                && !self.core.rs.holds_token
                && (self.core.rs.acks_seen.contains_key(&(te + 1))
                    || self.core.rs.held_acks.contains_key(&(te + 1)))
            {
                self.core.rs.serving_retransmissions = false;
            }
        }
    }

    fn apply_batch_to_book(&mut self, ack: &AckMessage, cfg: &RunCfg) -> Vec<Fill> {
        if cfg.app != AppKind::Floor {
            return Vec::new();
        }
        let mut fills = Vec::new();
        for j in 0..ack.acked.len() {
            let g = ack.global_seq_of(j);
            if g < self.replay_next {
                continue;
            }
            let Some((msg, _)) = self.core.rs.log.get(&g) else { continue };
            if let Ok(AppRecord::Order(order)) = AppRecord::decode(&msg.payload) {
                if let Applied::Fills(f) = self.book.apply(&order, g, msg.source_seq, cfg.price_rule) {
                    fills.extend(f);
                }
            }
            self.replay_next = g + 1;
        }
        fills
    }

    fn schedule_release(&mut self, ack: &AckMessage, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let local_release = ack.timestamp + cfg.delta_a();
        let fire_at = self.from_local(local_release);
        self.release_backlog.insert(ack.token_num, fire_at);
        if fire_at <= now {
            self.on_release(ack.token_num, now, cfg, out);
        } else {
            out.push(Action::Timer(fire_at, TimerTag::Release { token: ack.token_num }));
        }
    }

    fn on_release(&mut self, token: u64, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let Some(due) = self.release_backlog.remove(&token) else { return };
        let Some(ack) = self.core.rs.acks_seen.get(&token).cloned() else { return };
        let catchup = now > due;
        let mut records = Vec::with_capacity(ack.acked.len());
        for j in 0..ack.acked.len() {
            let g = ack.global_seq_of(j);
            if let Some((msg, _)) = self.core.rs.log.get(&g) {
                self.release_hash = super::chain_hash(self.release_hash, g, &msg.payload);
                records.push(ReleasedRecord {
                    global_seq: g,
                    source: msg.source,
                    source_seq: msg.source_seq,
                    payload: msg.payload.clone(),
                });
            }
        }
        self.released_through = self.released_through.max(token);
        let mut rec = TraceRecord::new(now, self.core.name(cfg), kind::RELEASE)
            .field("token", token)
            .field("base", ack.base_global_seq)
            .field("k", ack.batch_len())
            .field("bh", super::messages::batch_hash(ack.base_global_seq, &ack.acked))
            .field("catchup", u64::from(catchup));
        if cfg.app == AppKind::Ticker {
            if let Some(syms) = super::tick_symbol_bytes(&records) {
                rec = rec.field("syms", syms);
            }
        }
        out.push(Action::Trace(rec));
        if self.has_region {
            out.push(Action::Region(
                Wire::RegionBatch {
                    rt: self.core.me,
                    token,
                    base: ack.base_global_seq,
                    records,
                },
                LossKey { class: 4, a: fnv1a(self.core.name(cfg).as_bytes()), b: token, c: 0 },
            ));
        }
    }

    // ------------------------------------------------------------------
    // reformation client

    fn on_invitation(&mut self, xr: NodeId, round: u64, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if matches!(self.join_job, Some((_, r, _)) if r >= round) {
            return;
        }
        let t_r = self.core.rs.next_token;
        out.push(Action::Trace(
            TraceRecord::new(now, self.core.name(cfg), kind::JOIN)
                .field("round", round)
                .field("tr", t_r),
        ));
        out.push(Action::Unicast(xr, Wire::Join { from: self.core.me, t_r, round }));
        out.push(Action::Timer(now + cfg.tau_r(), TimerTag::JoinRetry { round }));
        self.join_job = Some((xr, round, 0));
    }

    fn adopt_ring(&mut self, nr: NewRingMsg, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if nr.round <= self.adopted_round {
            return;
        }
        self.adopted_round = nr.round;
        self.join_job = None;
        self.pending_handoff = None;
        self.handoff_attempts = 0;
        self.core.report.clear();
        self.core.table.clear();
        let site_pos = nr.members.iter().position(|n| *n == nr.token_site).unwrap_or(0);
        self.core.ring = RingView {
            members: nr.members.clone(),
            epoch: nr.epoch,
            base: nr.start_token,
            site0_pos: site_pos,
        };
        self.in_ring = nr.members.contains(&self.core.me);
        self.core.rs.ring_pos = self.core.ring.pos_of(self.core.me).unwrap_or(0);
        self.core.rs.holds_token = self.core.me == nr.token_site;
        self.core.rs.serving_retransmissions = self.core.rs.holds_token;
        if self.core.rs.holds_token {
            out.push(Action::Timer(
                self.core.ring.sched(nr.start_token, cfg),
                TimerTag::TokenEmit { token: nr.start_token },
            ));
        } else if self.core.rs.next_token < nr.start_token {
            // lagging member: recover the gap from the appointed site before
            // the first new token
            let from = self.core.rs.next_token;
            self.core
                .request_items(vec![RecoveryItem::AcksFrom(from)], nr.token_site, from, now, cfg);
            self.core.pump_requests(now, cfg, out);
        } else if self.core.rs.next_token > nr.start_token {
            // we witnessed more than the new ring restarts from; demand
            // another formation that counts us
            let t_r = self.core.rs.next_token;
            self.core.file_report(
                FailureReason::UnrecoverableGap,
                FailureEvidence::Token(t_r),
                now,
                cfg,
                out,
            );
        }
        self.core.arm_watchdog(now, cfg, out);
    }

    /// Replay of this node's committed order stream (trade durability).
    pub fn replayed_fills(&self, cfg: &RunCfg) -> Vec<Fill> {
        let orders: Vec<(u64, u64, crate::apps::OrderPayload)> = self
            .core
            .rs
            .log
            .iter()
            .filter_map(|(g, (msg, _))| match AppRecord::decode(&msg.payload) {
                Ok(AppRecord::Order(o)) => Some((*g, msg.source_seq, o)),
                _ => None,
            })
            .collect();
        crate::apps::book::replay_fills(
            orders.iter().map(|(g, r, o)| (*g, *r, o)),
            cfg.price_rule,
        )
    }
}

pub fn trade_record(kind_: &str, node: &str, now: SimTime, ev: &TradeEvent, cfg: &RunCfg) -> Action {
    let _ = cfg;
    let mut rec = TraceRecord::new(now, node, kind_)
        .field("tentative", ev.tentative_at)
        .field("buy", ev.fill.buy_seq)
        .field("sell", ev.fill.sell_seq)
        .field("price", ev.fill.price)
        .field("qty", ev.fill.qty)
        .field("sym", ev.fill.symbol.clone());
    if let Some(c) = ev.confirmed_at {
        rec = rec.field("confirmed", c);
    }
    Action::Trace(rec)
}
