//! Edge customers: receive the remulticast stream in their region, detect
//! gaps by sequence number, repair through the region's repair endpoint
//! (guaranteed grade only), and fall back to their second R_T when the
//! primary region goes silent.

use super::messages::{Action, ReleasedRecord, RunCfg, TimerTag, Wire};
use crate::layering::{CustomerState, ServiceGrade};
use crate::protocol::NodeId;
use crate::simnet::trace::{kind, TraceRecord};
use crate::time::SimTime;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct CustomerNode {
    pub cs: CustomerState,
    pub region: NodeId,
    pub fallback: Option<NodeId>,
    pub active_rt: NodeId,
    /// Repair endpoint of the active region, when one exists.
    pub rx_of: BTreeMap<NodeId, NodeId>,
    pub exchange: bool,
    last_activity: SimTime,
    stream_high: u64,
    /// Outstanding repairs: seq -> (attempts, next_retry).
    pending: BTreeMap<u64, (u32, SimTime)>,
    pub delivered_hash: u64,
    pub delivered_count: u64,
    payloads: BTreeMap<u64, ReleasedRecord>,
    switched: bool,
}

impl CustomerNode {
    pub fn new(me: NodeId, grade: ServiceGrade, region: NodeId, fallback: Option<NodeId>, rx_of: BTreeMap<NodeId, NodeId>, exchange: bool) -> Self {
        CustomerNode {
            cs: CustomerState::new(me, grade),
            region,
            fallback,
            active_rt: region,
            rx_of,
            exchange,
            last_activity: SimTime::ZERO,
            stream_high: 0,
            pending: BTreeMap::new(),
            delivered_hash: 0,
            delivered_count: 0,
            payloads: BTreeMap::new(),
            switched: false,
        }
    }

    pub fn me(&self) -> NodeId {
        self.cs.id
    }

    pub fn quiet(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn start(&mut self, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        self.last_activity = now;
        out.push(Action::Timer(now + cfg.tau_t() * 2, TimerTag::FallbackCheck));
    }

    pub fn on_deliver(&mut self, wire: Wire, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        match wire {
            Wire::RegionBatch { rt, base, records, .. } => {
                if rt != self.active_rt {
                    return;
                }
                self.last_activity = now;
                let top = base + records.len() as u64;
                self.stream_high = self.stream_high.max(top.saturating_sub(1));
                for rec in records {
                    self.take_record(rec, now, cfg, out);
                }
                self.scan_gaps(now, cfg, out);
            }
            Wire::EdgeReply { records, not_retained } => {
                for rec in records {
                    let seq = rec.global_seq;
                    self.take_record(rec, now, cfg, out);
                    self.pending.remove(&seq);
                }
                for g in not_retained {
                    if self.pending.remove(&g).is_some() {
                        out.push(Action::Trace(
                            TraceRecord::new(now, cfg.name(self.me()), kind::EDGE_LOST).field("seq", g),
                        ));
                        for d in self.cs.give_up(g) {
                            self.deliver_seq(d, now, cfg, out);
                        }
                    }
                }
            }
            Wire::ScopeUpdate { dead } => {
                if dead.contains(&self.active_rt) {
                    self.switch_fallback(now, cfg, out);
                }
            }
            _ => {}
        }
    }

    pub fn on_timer(&mut self, tag: TimerTag, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        match tag {
            TimerTag::FallbackCheck => {
                let silence = now.saturating_sub(self.last_activity);
                if silence > cfg.tau_t() * 2 && !self.switched {
                    self.switch_fallback(now, cfg, out);
                }
                out.push(Action::Timer(now + cfg.tau_t(), TimerTag::FallbackCheck));
            }
            TimerTag::EdgeRetry => {
                let mut exhausted = Vec::new();
                let mut resend = Vec::new();
                for (seq, (attempts, next_retry)) in self.pending.iter_mut() {
                    if *next_retry <= now {
                        *attempts += 1;
                        if *attempts > cfg.k_r() {
                            exhausted.push(*seq);
                        } else {
                            *next_retry = now + cfg.tau_r();
                            resend.push(*seq);
                        }
                    }
                }
                for seq in exhausted {
                    self.pending.remove(&seq);
                    out.push(Action::Trace(
                        TraceRecord::new(now, cfg.name(self.me()), kind::EDGE_LOST).field("seq", seq),
                    ));
                    for d in self.cs.give_up(seq) {
                        self.deliver_seq(d, now, cfg, out);
                    }
                }
                if !resend.is_empty() {
                    self.send_edge_request(resend, now, cfg, out);
                }
                if let Some(next) = self.pending.values().map(|(_, t)| *t).min() {
                    out.push(Action::Timer(next, TimerTag::EdgeRetry));
                }
            }
            _ => {}
        }
    }

    fn take_record(&mut self, rec: ReleasedRecord, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let seq = rec.global_seq;
        self.payloads.insert(seq, rec);
        self.pending.remove(&seq);
        for d in self.cs.on_record(seq) {
            self.deliver_seq(d, now, cfg, out);
        }
    }

    fn deliver_seq(&mut self, seq: u64, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if let Some(rec) = self.payloads.remove(&seq) {
            self.delivered_hash = super::chain_hash(self.delivered_hash, seq, &rec.payload);
            self.delivered_count += 1;
            if seq % 64 == 0 {
                // coarse progress marker; final totals land in QUIESCE
                out.push(Action::Trace(
                    TraceRecord::new(now, cfg.name(self.me()), kind::CUSTOMER_DELIVER)
                        .field("through", seq),
                ));
            }
        }
    }

    fn scan_gaps(&mut self, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        match self.cs.grade {
            ServiceGrade::BestEffort => {
                // never request; move past anything a later record implies
                // is gone
                let missing: Vec<u64> = self.cs.repair_requests_best_effort(self.stream_high);
                for seq in missing {
                    out.push(Action::Trace(
                        TraceRecord::new(now, cfg.name(self.me()), kind::EDGE_LOST).field("seq", seq),
                    ));
                    for d in self.cs.give_up(seq) {
                        self.deliver_seq(d, now, cfg, out);
                    }
                }
            }
            ServiceGrade::Guaranteed => {
                let wanted = self.cs.repair_requests(self.stream_high);
                let fresh: Vec<u64> =
                    wanted.into_iter().filter(|s| !self.pending.contains_key(s)).collect();
                if fresh.is_empty() {
                    return;
                }
                for seq in &fresh {
                    self.pending.insert(*seq, (0, now + cfg.tau_r()));
                }
                self.send_edge_request(fresh, now, cfg, out);
                out.push(Action::Timer(now + cfg.tau_r(), TimerTag::EdgeRetry));
            }
        }
    }

    fn send_edge_request(&self, seqs: Vec<u64>, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let Some(rx) = self.rx_of.get(&self.active_rt) else {
            return;
        };
        out.push(Action::Trace(
            TraceRecord::new(now, cfg.name(self.me()), kind::EDGE_REQUEST)
                .field("to", cfg.name(*rx))
                .field("seqs", seqs.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
        ));
        out.push(Action::Unicast(*rx, Wire::EdgeRequest { from: self.me(), seqs }));
    }

    fn switch_fallback(&mut self, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let Some(fb) = self.fallback else { return };
        if self.active_rt == fb {
            return;
        }
        out.push(Action::Trace(
            TraceRecord::new(now, cfg.name(self.me()), kind::FALLBACK)
                .field("from", cfg.name(self.active_rt))
                .field("to", cfg.name(fb)),
        ));
        self.active_rt = fb;
        self.switched = true;
        self.last_activity = now;
    }
}
