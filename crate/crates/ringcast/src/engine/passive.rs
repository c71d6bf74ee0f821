//! Passive protocol receivers: secondary receivers (R_S) that mirror the
//! committed stream without ever acknowledging, and repair endpoints (R_x)
//! colocated with an R_T that serve edge and secondary recovery from a
//! bounded retention window.

use super::core::{CommittedAck, ReceiverCore, RingView};
use super::messages::{Action, NewRingMsg, ReleasedRecord, RunCfg, TimerTag, Wire};
use super::secmember::SecMember;
use crate::protocol::{stability_watermarks, NodeId, RecoveryItem, RetransmitStimulus};
use crate::reformation::FailureReason;
use crate::simnet::trace::{kind, TraceRecord};
use crate::simnet::{fnv1a, LossKey};
use crate::time::SimTime;
use std::collections::BTreeMap;

/// A secondary receiver: full mirror of the protocol stream, recovery via
/// its assigned primary's repair endpoint, gated secondary-ring membership,
/// and its own remulticast region.
#[derive(Debug, Clone)]
pub struct SecondaryNode {
    pub core: ReceiverCore,
    pub sec: Option<SecMember>,
    pub has_region: bool,
    pub skew_us: i64,
    release_backlog: BTreeMap<u64, SimTime>,
    pub released_through: u64,
    pub release_hash: u64,
}

impl SecondaryNode {
    pub fn new(me: NodeId, ring: RingView, assigned_rx: NodeId, sec: Option<SecMember>, has_region: bool, skew_us: i64) -> Self {
        SecondaryNode {
            core: ReceiverCore::new(me, ring, false, Some(assigned_rx)),
            sec,
            has_region,
            skew_us,
            release_backlog: BTreeMap::new(),
            released_through: 0,
            release_hash: 0,
        }
    }

    pub fn quiet(&self) -> bool {
        self.core.quiet()
            && self.release_backlog.is_empty()
            && self.sec.as_ref().map_or(true, |s| s.quiet())
    }

    pub fn start(&mut self, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        self.core.arm_watchdog(now, cfg, out);
        if let Some(sec) = &mut self.sec {
            sec.start(&self.core.rs, self.core.me, now, cfg, out);
        }
    }

    pub fn on_deliver(&mut self, wire: Wire, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let mut committed = Vec::new();
        match wire {
            Wire::Source(msg) => {
                self.core.deliver_source(msg, now, cfg, &mut committed, out);
            }
            Wire::Ack(a) => {
                if a.token_num >= self.core.rs.next_token {
                    self.core.deliver_ack(a, now, cfg, &mut committed, out);
                }
            }
            Wire::Replies { items } | Wire::Retrans { items } => {
                self.core.deliver_replies(items, now, cfg, &mut committed, out);
            }
            Wire::SecToken { ring, n, from } => {
                out.push(Action::Unicast(from, Wire::SecTokenAck { ring, n }));
                if let Some(sec) = &mut self.sec {
                    sec.on_token(n, &self.core.rs, self.core.me, now, cfg, out);
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
            Wire::NewRing(nr) => self.adopt_ring(nr, now, cfg, out),
            Wire::ReportAck => self.core.report.on_ack(),
            _ => {}
        }
        self.after_commits(committed, now, cfg, out);
    }

    pub fn on_timer(&mut self, tag: TimerTag, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        match tag {
            TimerTag::AckWatchdog { token } => {
                self.core.watchdog_request(token, now, cfg, out);
            }
            TimerTag::RequestRetry => self.core.pump_requests(now, cfg, out),
            TimerTag::Release { token } => self.on_release(token, now, cfg, out),
            TimerTag::ReportRetry => {
                let me = self.core.me;
                self.core.report.on_retry(me, now, cfg, out);
            }
            TimerTag::SecRetry { n } => {
                if let Some(sec) = &mut self.sec {
                    sec.on_retry(n, self.core.me, now, cfg, out);
                    if let Some(evidence) = sec.take_failure() {
                        self.core.file_report(FailureReason::TokenNotPassed, evidence, now, cfg, out);
                    }
                }
            }
            _ => {}
        }
    }

    fn after_commits(&mut self, committed: Vec<CommittedAck>, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        for c in &committed {
            self.schedule_release(c, now, cfg, out);
        }
        if !committed.is_empty() {
            self.core.arm_watchdog(now, cfg, out);
        }
        if let Some(sec) = &mut self.sec {
            sec.try_pass(&self.core.rs, self.core.me, now, cfg, out);
            let gaps = sec.take_gaps();
            if !gaps.is_empty() {
                let token = self.core.rs.next_token;
                let target = self.core.fixed_target.expect("secondaries have assigned support");
                self.core.request_items(gaps, target, token, now, cfg);
                self.core.pump_requests(now, cfg, out);
            }
        }
    }

    fn schedule_release(&mut self, c: &CommittedAck, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let local_release = c.ack.timestamp + cfg.delta_a();
        let fire_at = SimTime((local_release.0 as i64 - self.skew_us).max(0) as u64);
        self.release_backlog.insert(c.ack.token_num, fire_at);
        if fire_at <= now {
            self.on_release(c.ack.token_num, now, cfg, out);
        } else {
            out.push(Action::Timer(fire_at, TimerTag::Release { token: c.ack.token_num }));
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
        if cfg.app == crate::apps::AppKind::Ticker {
            if let Some(syms) = super::tick_symbol_bytes(&records) {
                rec = rec.field("syms", syms);
            }
        }
        out.push(Action::Trace(rec));
        if self.has_region {
            out.push(Action::Region(
                Wire::RegionBatch { rt: self.core.me, token, base: ack.base_global_seq, records },
                LossKey { class: 4, a: fnv1a(self.core.name(cfg).as_bytes()), b: token, c: 0 },
            ));
        }
    }

    fn adopt_ring(&mut self, nr: NewRingMsg, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let site_pos = nr.members.iter().position(|n| *n == nr.token_site).unwrap_or(0);
        self.core.ring = RingView {
            members: nr.members,
            epoch: nr.epoch,
            base: nr.start_token,
            site0_pos: site_pos,
        };
        self.core.report.clear();
        if self.core.rs.next_token < nr.start_token {
            let from = self.core.rs.next_token;
            let target = self.core.fixed_target.expect("assigned support");
            self.core.request_items(vec![RecoveryItem::AcksFrom(from)], target, from, now, cfg);
            self.core.pump_requests(now, cfg, out);
        }
        self.core.arm_watchdog(now, cfg, out);
    }
}

/// A repair endpoint colocated with an R_T: mirrors the protocol stream off
/// the same tree leaf, pulls its own gaps from its host over the internal
/// link, serves recovery requests, and prunes its log to the stability
/// watermark minus a margin of `2m` tokens.
#[derive(Debug, Clone)]
pub struct RepairNode {
    pub core: ReceiverCore,
    pub host: NodeId,
    /// Retention margin in tokens behind the stability watermark.
    pub margin_tokens: u64,
}

impl RepairNode {
    pub fn new(me: NodeId, ring: RingView, host: NodeId) -> Self {
        let margin = 2 * ring.m() as u64;
        RepairNode {
            core: ReceiverCore::new(me, ring, false, Some(host)),
            host,
            margin_tokens: margin,
        }
    }

    pub fn quiet(&self) -> bool {
        self.core.quiet()
    }

    pub fn start(&mut self, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        self.core.arm_watchdog(now, cfg, out);
    }

    pub fn on_deliver(&mut self, wire: Wire, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let mut committed = Vec::new();
        match wire {
            Wire::Source(msg) => {
                self.core.deliver_source(msg, now, cfg, &mut committed, out);
            }
            Wire::Ack(a) => {
                if a.token_num >= self.core.rs.next_token {
                    self.core.deliver_ack(a, now, cfg, &mut committed, out);
                }
            }
            Wire::Replies { items } | Wire::Retrans { items } => {
                self.core.deliver_replies(items, now, cfg, &mut committed, out);
            }
            Wire::Request { from, items } => self.serve(from, items, now, cfg, out),
            Wire::EdgeRequest { from, seqs } => self.serve_edge(from, seqs, now, cfg, out),
            Wire::NewRing(nr) => {
                let site_pos = nr.members.iter().position(|n| *n == nr.token_site).unwrap_or(0);
                self.margin_tokens = 2 * nr.members.len() as u64;
                self.core.ring = RingView {
                    members: nr.members,
                    epoch: nr.epoch,
                    base: nr.start_token,
                    site0_pos: site_pos,
                };
                self.core.arm_watchdog(now, cfg, out);
            }
            Wire::ReportAck => self.core.report.on_ack(),
            _ => {}
        }
        if !committed.is_empty() {
            self.core.arm_watchdog(now, cfg, out);
            self.prune(now);
        }
    }

    pub fn on_timer(&mut self, tag: TimerTag, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        match tag {
            TimerTag::AckWatchdog { token } => self.core.watchdog_request(token, now, cfg, out),
            TimerTag::RequestRetry => self.core.pump_requests(now, cfg, out),
            TimerTag::ReportRetry => {
                let me = self.core.me;
                self.core.report.on_retry(me, now, cfg, out);
            }
            _ => {}
        }
    }

    fn serve(&self, from: NodeId, items: Vec<RecoveryItem>, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let replies = self.core.rs.lookup_stimulus(&RetransmitStimulus::Explicit(items.clone()));
        if replies.is_empty() {
            return;
        }
        let rendered = items
            .iter()
            .map(|i| super::messages::item_to_str(i, &cfg.names))
            .collect::<Vec<_>>()
            .join(",");
        out.push(Action::Trace(
            TraceRecord::new(now, self.core.name(cfg), kind::RETRANS)
                .field("item", rendered)
                .field("mode", "u"),
        ));
        out.push(Action::Unicast(from, Wire::Replies { items: replies }));
    }

    /// Edge repair: customers ask for released global sequences; replies are
    /// multicast on the host's region so one retransmission can fill many
    /// gaps.
    fn serve_edge(&self, _from: NodeId, seqs: Vec<u64>, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let mut records = Vec::new();
        let mut not_retained = Vec::new();
        for g in seqs {
            if g < self.core.rs.retention_floor {
                not_retained.push(g);
            } else if let Some((msg, _)) = self.core.rs.log.get(&g) {
                records.push(ReleasedRecord {
                    global_seq: g,
                    source: msg.source,
                    source_seq: msg.source_seq,
                    payload: msg.payload.clone(),
                });
            }
        }
        if records.is_empty() && not_retained.is_empty() {
            return;
        }
        out.push(Action::Trace(
            TraceRecord::new(now, self.core.name(cfg), kind::RETRANS)
                .field(
                    "item",
                    records
                        .iter()
                        .map(|r| format!("g{}", r.global_seq))
                        .chain(not_retained.iter().map(|g| format!("!g{g}")))
                        .collect::<Vec<_>>()
                        .join(","),
                )
                .field("mode", "m"),
        ));
        out.push(Action::Region(
            Wire::EdgeReply { records, not_retained },
            LossKey { class: 6, a: fnv1a(self.core.name(cfg).as_bytes()), b: now.0, c: 0 },
        ));
    }

    fn prune(&mut self, _now: SimTime) {
        let (all_have, _) = stability_watermarks(self.core.highest_seen, self.core.ring.m());
        let floor_token = all_have.saturating_sub(self.margin_tokens);
        if floor_token < 2 {
            return;
        }
        if let Some(ack) = self.core.rs.acks_seen.get(&floor_token) {
            let floor_global = ack.base_global_seq;
            self.core.rs.prune_below(floor_global);
        }
    }
}
