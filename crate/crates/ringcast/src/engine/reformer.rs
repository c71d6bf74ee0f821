//! Reformation servers (X_R): collect failure reports, invite the operable
//! receivers, pick the restart token and the new token site, and announce
//! the reformed ring. Also repairs secondary rings and reassigns remulticast
//! scopes when an R_T dies.

use super::messages::{Action, NewRingMsg, RunCfg, SecRingUpdate, TimerTag, Wire};
use crate::protocol::NodeId;
use crate::reformation::{
    form_ring, FailureEvidence, FailureReport, FormationRefusal, ReformationPhase,
    ReformationServerState,
};
use crate::simnet::trace::{kind, TraceRecord};
use crate::simnet::LossKey;
use crate::time::SimTime;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct ReformerNode {
    pub state: ReformationServerState,
    /// The ring as this server last announced or initially knew it.
    pub known_ring: Vec<NodeId>,
    pub sec_rings: BTreeMap<u16, Vec<NodeId>>,
    last_start_token: u64,
    last_done_at: Option<SimTime>,
    last_announce: Option<NewRingMsg>,
}

impl ReformerNode {
    pub fn new(me: NodeId, ring: Vec<NodeId>, sec_rings: BTreeMap<u16, Vec<NodeId>>) -> Self {
        ReformerNode {
            state: ReformationServerState::new(me),
            known_ring: ring,
            sec_rings,
            last_start_token: 0,
            last_done_at: None,
            last_announce: None,
        }
    }

    pub fn me(&self) -> NodeId {
        self.state.id
    }

    pub fn quiet(&self) -> bool {
        matches!(self.state.phase, ReformationPhase::Idle | ReformationPhase::Done)
    }

    pub fn on_deliver(&mut self, wire: Wire, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        match wire {
            Wire::Report(report) => self.on_report(report, now, cfg, out),
            Wire::Join { from, t_r, round } => {
                if round == self.state.round
                    && matches!(self.state.phase, ReformationPhase::Inviting | ReformationPhase::Forming)
                {
                    self.state.record_join(from, t_r);
                }
                out.push(Action::Unicast(from, Wire::JoinAck { round }));
            }
            _ => {}
        }
    }

    pub fn on_timer(&mut self, tag: TimerTag, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        match tag {
            TimerTag::InviteSend { round } => {
                if round == self.state.round
                    && matches!(self.state.phase, ReformationPhase::Inviting)
                {
                    self.send_invitations(round, now, cfg, out);
                }
            }
            TimerTag::JoinWindow { round } => self.on_window_close(round, now, cfg, out),
            _ => {}
        }
    }

    fn on_report(&mut self, report: FailureReport, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        out.push(Action::Unicast(report.reporter, Wire::ReportAck));
        // secondary-ring stalls are repaired without touching the primary
        // ring
        if report.reason == crate::reformation::FailureReason::TokenNotPassed {
            if let Some((ring_id, order)) = self.sec_ring_of(report.reporter) {
                self.repair_sec_ring(ring_id, order, &report, now, cfg, out);
                return;
            }
        }
        if !matches!(self.state.phase, ReformationPhase::Idle | ReformationPhase::Done) {
            return; // a round is already in flight
        }
        // a report about a failure the last round already solved: re-send
        // the announcement to the straggler instead of reforming again
        if let (Some(done_at), Some(announce)) = (self.last_done_at, &self.last_announce) {
            let fresh = now.saturating_sub(done_at) < cfg.join_window + cfg.tau_t() * 2;
            let stale_evidence =
                matches!(report.evidence, FailureEvidence::Token(t) if t < self.last_start_token);
            if fresh && stale_evidence {
                out.push(Action::Unicast(report.reporter, Wire::NewRing(announce.clone())));
                return;
            }
        }
        self.begin_round(now, cfg, out);
    }

    fn begin_round(&mut self, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        let closes = now + cfg.join_window;
        let round = self.state.begin_round(closes);
        self.send_invitations(round, now, cfg, out);
        // repeat invitations across the window so one loss cannot silence a
        // member
        for j in 1..=cfg.k_r() as u64 {
            out.push(Action::Timer(
                now + crate::time::SimDuration(cfg.tau_r().0 / 2 * j),
                TimerTag::InviteSend { round },
            ));
        }
        out.push(Action::Timer(closes, TimerTag::JoinWindow { round }));
    }

    fn send_invitations(&self, round: u64, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        out.push(Action::Trace(
            TraceRecord::new(now, cfg.name(self.me()), kind::INVITE).field("round", round),
        ));
        out.push(Action::Multicast(
            Wire::Invitation { xr: self.me(), round },
            LossKey { class: 7, a: self.me().0 as u64, b: round, c: now.0 },
        ));
        for member in &self.known_ring {
            out.push(Action::Unicast(*member, Wire::Invitation { xr: self.me(), round }));
        }
    }

    fn on_window_close(&mut self, round: u64, now: SimTime, cfg: &RunCfg, out: &mut Vec<Action>) {
        if round != self.state.round || !matches!(self.state.phase, ReformationPhase::Inviting) {
            return;
        }
        // hold the window open once if a previously-known member is silent
        let missing =
            self.known_ring.iter().any(|m| !self.state.collected.contains_key(m));
        if missing && self.state.widenings == 0 {
            self.state.widenings = 1;
            let closes = now + cfg.join_window;
            self.state.window_closes = closes;
            self.send_invitations(round, now, cfg, out);
            out.push(Action::Timer(closes, TimerTag::JoinWindow { round }));
            return;
        }
        match form_ring(&self.known_ring, &self.state.collected, cfg.policy, cfg.start_token_plus_one) {
            Err(refusal) => {
                // widen and retry until enough of the ring answers
                let detail = match refusal {
                    FormationRefusal::TooFewResponders { responders } => format!("responders={responders}"),
                    FormationRefusal::QuorumNotMet { responders, required } => {
                        format!("quorum={responders}/{required}")
                    }
                };
                out.push(Action::Trace(
                    TraceRecord::new(now, cfg.name(self.me()), kind::INVITE)
                        .field("round", round)
                        .field("refused", detail),
                ));
                self.state.widenings += 1;
                let closes = now + cfg.join_window * 2;
                self.state.window_closes = closes;
                self.send_invitations(round, now, cfg, out);
                out.push(Action::Timer(closes, TimerTag::JoinWindow { round }));
            }
            Ok(ring) => {
                self.state.phase = ReformationPhase::Done;
                let msg = NewRingMsg {
                    round,
                    members: ring.members.clone(),
                    start_token: ring.start_token,
                    token_site: ring.token_site,
                    epoch: now,
                };
                out.push(Action::Trace(
                    TraceRecord::new(now, cfg.name(self.me()), kind::NEW_RING)
                        .field("round", round)
                        .field("start", ring.start_token)
                        .field("site", cfg.name(ring.token_site))
                        .field("epoch", msg.epoch)
                        .field(
                            "members",
                            ring.members
                                .iter()
                                .map(|n| cfg.name(*n).to_string())
                                .collect::<Vec<_>>()
                                .join(";"),
                        ),
                ));
                out.push(Action::Multicast(
                    Wire::NewRing(msg.clone()),
                    LossKey { class: 7, a: self.me().0 as u64, b: round, c: 1 },
                ));
                for member in &msg.members {
                    out.push(Action::Unicast(*member, Wire::NewRing(msg.clone())));
                }
                // scope rewrite: customers of dead R_T promote their
                // fallback at once
                let dead: Vec<NodeId> = self
                    .known_ring
                    .iter()
                    .filter(|n| !msg.members.contains(n))
                    .copied()
                    .collect();
                if !dead.is_empty() {
                    out.push(Action::Multicast(
                        Wire::ScopeUpdate { dead },
                        LossKey { class: 7, a: self.me().0 as u64, b: round, c: 2 },
                    ));
                }
                self.known_ring = msg.members.clone();
                self.last_start_token = msg.start_token;
                self.last_done_at = Some(now);
                self.last_announce = Some(msg);
            }
        }
    }

    fn sec_ring_of(&self, node: NodeId) -> Option<(u16, Vec<NodeId>)> {
        self.sec_rings
            .iter()
            .find(|(_, order)| order.contains(&node))
            .map(|(id, order)| (*id, order.clone()))
    }

    fn repair_sec_ring(
        &mut self,
        ring_id: u16,
        order: Vec<NodeId>,
        report: &FailureReport,
        now: SimTime,
        cfg: &RunCfg,
        out: &mut Vec<Action>,
    ) {
        // the reporter's successor is the unresponsive member
        let Some(idx) = order.iter().position(|n| *n == report.reporter) else { return };
        let dead = order[(idx + 1) % order.len()];
        let new_order: Vec<NodeId> = order.iter().filter(|n| **n != dead).copied().collect();
        if new_order.len() < 2 {
            return;
        }
        let resume_n = match report.evidence {
            FailureEvidence::Token(t) => t,
            FailureEvidence::Message(_) => return,
        };
        let update = SecRingUpdate { ring: ring_id, order: new_order.clone(), resume_n, starter: report.reporter };
        out.push(Action::Trace(
            TraceRecord::new(now, cfg.name(self.me()), kind::SEC_RING)
                .field("ring", ring_id)
                .field("resume", resume_n)
                .field(
                    "order",
                    new_order.iter().map(|n| cfg.name(*n).to_string()).collect::<Vec<_>>().join(";"),
                ),
        ));
        for member in &new_order {
            out.push(Action::Unicast(*member, Wire::SecRing(update.clone())));
        }
        self.sec_rings.insert(ring_id, new_order);
    }
}
