//! Shared recovery machinery: the pending-request table with NACK-wave
//! gating and retry/escalation, and the positive-acknowledgement failover
//! client for reformation servers.

use super::messages::{item_to_str, Action, RunCfg, TimerTag, Wire};
use crate::protocol::{Label, NodeId, RecoveryItem};
use crate::reformation::{failover_xr, FailureEvidence, FailureReason, FailureReport};
use crate::simnet::trace::{kind, TraceRecord};
use crate::time::SimTime;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Pending {
    pub item: RecoveryItem,
    pub target: NodeId,
    pub attempts: u32,
    pub next_retry: SimTime,
    /// First token whose observation makes this request's NACK wave
    /// eligible; 0 means immediately sendable.
    pub eligible_at_token: u64,
    pub sent_once: bool,
    /// Token whose batch this message belongs to (for trace records).
    pub covering_token: u64,
}

/// Outstanding retransmission requests owned by one node.
#[derive(Debug, Clone, Default)]
pub struct RequestTable {
    pending: BTreeMap<RecoveryItem, Pending>,
}

impl RequestTable {
    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn contains(&self, item: &RecoveryItem) -> bool {
        self.pending.contains_key(item)
    }

    pub fn covers_acks_from(&self, from: u64) -> bool {
        self.pending.keys().any(|i| matches!(i, RecoveryItem::AcksFrom(f) if *f <= from))
    }

    pub fn insert(&mut self, p: Pending) {
        self.pending.entry(p.item).or_insert(p);
    }

    /// Drops requests satisfied by protocol progress: acks below `next_token`
    /// and messages the receiver now holds.
    pub fn cancel_satisfied(
        &mut self,
        next_token: u64,
        has_label: impl Fn(&Label) -> bool,
        has_seq: impl Fn(u64) -> bool,
    ) {
        self.pending.retain(|item, _| match item {
            RecoveryItem::Ack(t) => *t >= next_token,
            RecoveryItem::AcksFrom(f) => *f >= next_token,
            RecoveryItem::MessageByLabel(l) => !has_label(l),
            RecoveryItem::MessageBySeq(g) => !has_seq(*g),
        });
    }

    pub fn cancel_label(&mut self, label: &Label) {
        self.pending.remove(&RecoveryItem::MessageByLabel(*label));
    }

    pub fn clear(&mut self) {
        self.pending.clear();
    }

    /// Sends every due, eligible request; escalates the exhausted ones.
    /// Returns the failure evidence of the first exhausted item, if any.
    pub fn pump(
        &mut self,
        me: NodeId,
        now: SimTime,
        highest_seen_token: u64,
        eligible_by_time: impl Fn(u64) -> bool,
        cfg: &RunCfg,
        out: &mut Vec<Action>,
    ) -> Option<(FailureReason, FailureEvidence)> {
        let mut exhausted = None;
        let mut to_send: Vec<(NodeId, RecoveryItem, u64)> = Vec::new();
        let me_name = cfg.name(me).to_string();
        self.pending.retain(|item, p| {
            let eligible = p.eligible_at_token == 0
                || highest_seen_token >= p.eligible_at_token
                || eligible_by_time(p.eligible_at_token);
            if !eligible {
                return true;
            }
            let due = !p.sent_once || p.next_retry <= now;
            if !due {
                return true;
            }
            if p.sent_once {
                p.attempts += 1;
            }
            if p.attempts > cfg.k_r() {
                if exhausted.is_none() {
                    let evidence = match item {
                        RecoveryItem::Ack(t) | RecoveryItem::AcksFrom(t) => FailureEvidence::Token(*t),
                        RecoveryItem::MessageByLabel(l) => FailureEvidence::Message(*l),
                        RecoveryItem::MessageBySeq(_) => FailureEvidence::Token(p.covering_token),
                    };
                    let reason = match item {
                        RecoveryItem::Ack(_) | RecoveryItem::AcksFrom(_) => FailureReason::TokenNotPassed,
                        _ => FailureReason::UnrecoverableGap,
                    };
                    exhausted = Some((reason, evidence));
                }
                return false;
            }
            p.sent_once = true;
            p.next_retry = now + cfg.tau_r();
            to_send.push((p.target, *item, p.covering_token));
            true
        });
        // batch per target
        let mut by_target: BTreeMap<NodeId, Vec<(RecoveryItem, u64)>> = BTreeMap::new();
        for (target, item, covering) in to_send {
            by_target.entry(target).or_default().push((item, covering));
        }
        for (target, items) in by_target {
            // message items carry their covering token in the trace so the
            // NACK wave schedule is checkable afterwards
            let rendered = items
                .iter()
                .map(|(i, covering)| match i {
                    RecoveryItem::MessageByLabel(_) | RecoveryItem::MessageBySeq(_) => {
                        format!("m{covering}:{}", item_to_str(i, &cfg.names).trim_start_matches(['m', 'g']))
                    }
                    _ => item_to_str(i, &cfg.names),
                })
                .collect::<Vec<_>>()
                .join(",");
            out.push(Action::Trace(
                TraceRecord::new(now, me_name.clone(), kind::REQUEST)
                    .field("to", cfg.name(target))
                    .field("items", rendered),
            ));
            out.push(Action::Unicast(
                target,
                Wire::Request { from: me, items: items.into_iter().map(|(i, _)| i).collect() },
            ));
        }
        if !self.pending.is_empty() {
            let next = self
                .pending
                .values()
                .map(|p| if p.sent_once { p.next_retry } else { now + cfg.tau_r() })
                .min()
                .unwrap();
            out.push(Action::Timer(next, TimerTag::RequestRetry));
        }
        exhausted
    }
}

/// Positive-acknowledgement report delivery with failover across redundant
/// reformation servers.
#[derive(Debug, Clone, Default)]
pub struct ReportClient {
    in_flight: Option<(FailureReport, u32)>,
}

impl ReportClient {
    pub fn idle(&self) -> bool {
        self.in_flight.is_none()
    }

    pub fn clear(&mut self) {
        self.in_flight = None;
    }

    /// Starts (or ignores, if one is already in flight) a report. Returns
    /// actions; a later `on_retry` drives retries and failover.
    pub fn file(
        &mut self,
        me: NodeId,
        report: FailureReport,
        now: SimTime,
        cfg: &RunCfg,
        out: &mut Vec<Action>,
    ) {
        if self.in_flight.is_some() {
            return;
        }
        let Some(target) = failover_xr(&cfg.xr_order, 0, cfg.k_r()) else {
            out.push(Action::TotalFailure);
            return;
        };
        out.push(Action::Trace(
            TraceRecord::new(now, cfg.name(me), kind::REPORT)
                .field("reason", reason_str(report.reason))
                .field("evidence", evidence_str(&report.evidence, cfg))
                .field("to", cfg.name(target)),
        ));
        out.push(Action::Unicast(target, Wire::Report(report.clone())));
        out.push(Action::Timer(now + cfg.tau_r(), TimerTag::ReportRetry));
        self.in_flight = Some((report, 0));
    }

    pub fn on_ack(&mut self) {
        self.in_flight = None;
    }

    pub fn on_retry(&mut self, me: NodeId, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let Some((report, attempts)) = self.in_flight.as_mut() else {
            return;
        };
        *attempts += 1;
        match failover_xr(&cfg.xr_order, *attempts, cfg.k_r()) {
            None => {
                out.push(Action::Trace(TraceRecord::new(now, cfg.name(me), kind::TOTAL_FAILURE)));
                out.push(Action::TotalFailure);
                self.in_flight = None;
            }
            Some(target) => {
                out.push(Action::Unicast(target, Wire::Report(report.clone())));
                out.push(Action::Timer(now + cfg.tau_r(), TimerTag::ReportRetry));
            }
        }
    }
}

pub fn reason_str(r: FailureReason) -> &'static str {
    match r {
        FailureReason::SourceAckTimeout => "source_ack_timeout",
        FailureReason::TokenNotPassed => "token_not_passed",
        FailureReason::UnrecoverableGap => "unrecoverable_gap",
    }
}

pub fn evidence_str(e: &FailureEvidence, cfg: &RunCfg) -> String {
    match e {
        FailureEvidence::Token(t) => format!("t{t}"),
        FailureEvidence::Message((s, q)) => format!("{}:{q}", cfg.name(*s)),
    }
}
