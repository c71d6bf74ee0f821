//! Primary sources (S_P): label and multicast application payloads, gate
//! orders against trader credentials, retransmit until acknowledged, and
//! escalate to a reformation server when acknowledgements stop.

use super::messages::{Action, RunCfg, TimerTag, Wire};
use super::recovery::ReportClient;
use crate::apps::floor::Accounts;
use crate::apps::{AppKind, AppRecord};
use crate::protocol::{NodeId, RecoveryReply, SourceState};
use crate::reformation::{FailureEvidence, FailureReason, FailureReport};
use crate::simnet::trace::{kind, TraceRecord};
use crate::simnet::{fnv1a, LossKey};
use crate::time::SimTime;

#[derive(Debug, Clone)]
pub struct SourceNode {
    pub ss: SourceState,
    pub accounts: Accounts,
    pub report: ReportClient,
    /// Sequences already escalated; they keep retrying on a slow schedule.
    reported: std::collections::BTreeSet<u64>,
}

impl SourceNode {
    pub fn new(me: NodeId, identity_tag: u64, accounts: Accounts) -> Self {
        SourceNode {
            ss: SourceState::new(me, identity_tag),
            accounts,
            report: ReportClient::default(),
            reported: Default::default(),
        }
    }

    pub fn me(&self) -> NodeId {
        self.ss.id
    }

    pub fn quiet(&self) -> bool {
        self.ss.unacked.is_empty() && self.report.idle()
    }

    /// Injects one workload record: orders pass the credential gate first;
    /// rejected orders never enter the multicast group.
    pub fn submit(&mut self, record: AppRecord, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if let AppRecord::Order(order) = &record {
            if cfg.app != AppKind::Ticker {
                if let Err(reason) = self.accounts.gate_order(order) {
                    out.push(Action::Trace(
                        TraceRecord::new(now, cfg.name(self.me()), kind::GATE_REJECT)
                            .field("trader", order.trader())
                            .field("reason", reason.name()),
                    ));
                    return;
                }
            }
        }
        // worst-case honest acknowledgement latency is one token period
        // plus a round trip; retries before that are pure noise
        let first_retry = now + cfg.tau_t() + cfg.tau_r();
        let msg = self.ss.submit(record.encode(), first_retry);
        out.push(Action::Trace(
            TraceRecord::new(now, cfg.name(self.me()), kind::SUBMIT).field("seq", msg.source_seq),
        ));
        out.push(Action::Multicast(
            Wire::Source(msg.clone()),
            LossKey { class: 1, a: fnv1a(cfg.name(self.me()).as_bytes()), b: msg.source_seq, c: 0 },
        ));
        out.push(Action::Timer(first_retry, TimerTag::SourceRetry));
    }

    pub fn on_deliver(&mut self, wire: Wire, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        match wire {
            Wire::Ack(a) => {
                for (s, q) in &a.acked {
                    if *s == self.me() {
                        self.ss.mark_acked(*q);
                        self.reported.remove(q);
                    }
                }
            }
            Wire::Replies { items } | Wire::Retrans { items } => {
                for item in items {
                    if let RecoveryReply::Ack(a) = item {
                        for (s, q) in &a.acked {
                            if *s == self.me() {
                                self.ss.mark_acked(*q);
                                self.reported.remove(q);
                            }
                        }
                    }
                }
            }
            Wire::ReportAck => self.report.on_ack(),
            _ => {}
        }
        let _ = (now, cfg, out);
    }

    pub fn on_timer(&mut self, tag: TimerTag, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        match tag {
            TimerTag::SourceRetry => {
                let due = self.ss.due_retries(now, cfg.tau_t() + cfg.tau_r());
                for msg in &due {
                    let attempt = self.ss.unacked[&msg.source_seq].attempts as u64;
                    out.push(Action::Trace(
                        TraceRecord::new(now, cfg.name(self.me()), kind::RESEND)
                            .field("seq", msg.source_seq)
                            .field("attempt", attempt),
                    ));
                    out.push(Action::Multicast(
                        Wire::Source(msg.clone()),
                        LossKey {
                            class: 1,
                            a: fnv1a(cfg.name(self.me()).as_bytes()),
                            b: msg.source_seq,
                            c: attempt,
                        },
                    ));
                }
                for seq in self.ss.exhausted(cfg.k_r()) {
                    if self.reported.insert(seq) {
                        let me = self.me();
                        self.report.file(
                            me,
                            FailureReport {
                                reporter: me,
                                reason: FailureReason::SourceAckTimeout,
                                evidence: FailureEvidence::Message((me, seq)),
                            },
                            now,
                            cfg,
                            out,
                        );
                        // keep retransmitting on a slow lane until the
                        // reformed ring acknowledges
                        if let Some(u) = self.ss.unacked.get_mut(&seq) {
                            u.attempts = 0;
                            u.next_retry = now + cfg.tau_t();
                        }
                    }
                }
                if let Some(next) = self.ss.unacked.values().map(|u| u.next_retry).min() {
                    out.push(Action::Timer(next, TimerTag::SourceRetry));
                }
            }
            TimerTag::ReportRetry => {
                let me = self.me();
                self.report.on_retry(me, now, cfg, out);
            }
            _ => {}
        }
    }
}
