//! Centralized ring reformation: failure reports, redundant reformation
//! servers, membership collection and restart-point selection.

use crate::protocol::{Label, NodeId};
use crate::time::SimTime;
use std::collections::BTreeMap;

/// Why a node asked for a reformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureReason {
    /// A source exhausted its retries without seeing an acknowledgement.
    SourceAckTimeout,
    /// A scheduled token never appeared.
    TokenNotPassed,
    /// Recovery of a missing item exhausted its retries, or the committed
    /// log conflicts with an incoming acknowledgement.
    UnrecoverableGap,
}

/// Reason-specific evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureEvidence {
    Token(u64),
    Message(Label),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureReport {
    pub reporter: NodeId,
    pub reason: FailureReason,
    pub evidence: FailureEvidence,
}

/// Restart-point policy. `Ticker` restarts at the highest reported t_r;
/// `Conservative` additionally requires a majority of the previous ring to
/// respond so no confirmed trade's witness set is lost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReformationPolicy {
    Ticker,
    Conservative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReformationPhase {
    Idle,
    Inviting,
    Forming,
    Done,
}

/// The outcome of a completed formation round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewRing {
    /// Members in ring order (old-ring relative order preserved).
    pub members: Vec<NodeId>,
    /// First token the new ring will assign (max reported t_r: the next
    /// unassigned number under the t_r = next-expected convention).
    pub start_token: u64,
    /// The appointed site: a responder reporting the maximum t_r, ties
    /// broken by lowest id.
    pub token_site: NodeId,
}

/// Formation failure: fewer than two responders, or a conservative quorum
/// was not met. The caller widens the invitation window and retries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormationRefusal {
    TooFewResponders { responders: usize },
    QuorumNotMet { responders: usize, required: usize },
}

/// Picks the new ring from collected joins, given the previous ring order.
///
/// `joins` maps responder to its reported t_r. Ring order preserves the old
/// layout order for responding members, then appends any new responders in
/// id order.
pub fn form_ring(
    old_ring: &[NodeId],
    joins: &BTreeMap<NodeId, u64>,
    policy: ReformationPolicy,
    start_token_plus_one: bool,
) -> Result<NewRing, FormationRefusal> {
    if joins.len() < 2 {
        return Err(FormationRefusal::TooFewResponders { responders: joins.len() });
    }
    if policy == ReformationPolicy::Conservative {
        let required = (old_ring.len() + 2) / 2; // ceil((m_old + 1) / 2)
        let old_responders = old_ring.iter().filter(|n| joins.contains_key(n)).count();
        if old_responders < required {
            return Err(FormationRefusal::QuorumNotMet { responders: old_responders, required });
        }
    }
    let max_tr = joins.values().copied().max().expect("nonempty");
    let token_site = joins
        .iter()
        .filter(|(_, tr)| **tr == max_tr)
        .map(|(n, _)| *n)
        .min()
        .expect("nonempty");
    let mut members: Vec<NodeId> = old_ring.iter().filter(|n| joins.contains_key(n)).copied().collect();
    let mut extra: Vec<NodeId> = joins.keys().filter(|n| !old_ring.contains(n)).copied().collect();
    extra.sort();
    members.extend(extra);
    Ok(NewRing {
        members,
        start_token: if start_token_plus_one { max_tr + 1 } else { max_tr },
        token_site,
    })
}

/// Per-server reformation state.
#[derive(Debug, Clone)]
pub struct ReformationServerState {
    pub id: NodeId,
    pub phase: ReformationPhase,
    pub collected: BTreeMap<NodeId, u64>,
    pub round: u64,
    pub window_closes: SimTime,
    pub widenings: u32,
}

impl ReformationServerState {
    pub fn new(id: NodeId) -> Self {
        ReformationServerState {
            id,
            phase: ReformationPhase::Idle,
            collected: BTreeMap::new(),
            round: 0,
            window_closes: SimTime::ZERO,
            widenings: 0,
        }
    }

    pub fn begin_round(&mut self, closes: SimTime) -> u64 {
        self.round += 1;
        self.phase = ReformationPhase::Inviting;
        self.collected.clear();
        self.window_closes = closes;
        self.widenings = 0;
        self.round
    }

    pub fn record_join(&mut self, node: NodeId, t_r: u64) {
        if matches!(self.phase, ReformationPhase::Inviting | ReformationPhase::Forming) {
            self.collected.insert(node, t_r);
        }
    }
}

/// Client-side failover across redundant reformation servers: the report is
/// sent with positive acknowledgement, `k_r` attempts per server, then the
/// next server. `attempt` counts total sends so far; returns the server to
/// try next, or `None` once every server is exhausted.
pub fn failover_xr(servers: &[NodeId], attempt: u32, k_r: u32) -> Option<NodeId> {
    let per_server = k_r.max(1);
    let idx = (attempt / per_server) as usize;
    servers.get(idx).copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nid(v: u32) -> NodeId {
        NodeId(v)
    }

    #[test]
    fn ticker_policy_picks_max_tr_lowest_id() {
        let old = vec![nid(1), nid(2), nid(3)];
        let joins = BTreeMap::from([(nid(1), 9u64), (nid(2), 11), (nid(3), 11)]);
        let ring = form_ring(&old, &joins, ReformationPolicy::Ticker, false).unwrap();
        assert_eq!(ring.start_token, 11);
        assert_eq!(ring.token_site, nid(2));
        assert_eq!(ring.members, vec![nid(1), nid(2), nid(3)]);
    }

    #[test]
    fn start_token_plus_one_reading() {
        let joins = BTreeMap::from([(nid(1), 9u64), (nid(2), 11)]);
        let ring = form_ring(&[nid(1), nid(2)], &joins, ReformationPolicy::Ticker, true).unwrap();
        assert_eq!(ring.start_token, 12);
    }

    #[test]
    fn dead_member_excluded_order_preserved() {
        let old = vec![nid(5), nid(3), nid(8), nid(1)];
        let joins = BTreeMap::from([(nid(5), 4u64), (nid(8), 4), (nid(1), 3)]);
        let ring = form_ring(&old, &joins, ReformationPolicy::Ticker, false).unwrap();
        assert_eq!(ring.members, vec![nid(5), nid(8), nid(1)]);
        assert_eq!(ring.token_site, nid(5));
    }

    #[test]
    fn conservative_needs_majority_of_old_ring() {
        let old = vec![nid(1), nid(2), nid(3), nid(4)];
        let joins = BTreeMap::from([(nid(1), 7u64)]);
        assert_eq!(
            form_ring(&old, &joins, ReformationPolicy::Conservative, false),
            Err(FormationRefusal::TooFewResponders { responders: 1 })
        );
        let joins = BTreeMap::from([(nid(1), 7u64), (nid(9), 7)]);
        assert_eq!(
            form_ring(&old, &joins, ReformationPolicy::Conservative, false),
            Err(FormationRefusal::QuorumNotMet { responders: 1, required: 3 })
        );
        let joins = BTreeMap::from([(nid(1), 7u64), (nid(2), 6), (nid(3), 7)]);
        let ring = form_ring(&old, &joins, ReformationPolicy::Conservative, false).unwrap();
        assert_eq!(ring.token_site, nid(1));
        assert_eq!(ring.start_token, 7);
    }

    #[test]
    fn too_few_responders_refused() {
        let joins = BTreeMap::from([(nid(1), 7u64)]);
        assert_eq!(
            form_ring(&[nid(1), nid(2)], &joins, ReformationPolicy::Ticker, false),
            Err(FormationRefusal::TooFewResponders { responders: 1 })
        );
    }

    #[test]
    fn failover_walks_servers_in_order() {
        let servers = vec![nid(10), nid(11)];
        // first server alive: chosen immediately
        assert_eq!(failover_xr(&servers, 0, 3), Some(nid(10)));
        assert_eq!(failover_xr(&servers, 2, 3), Some(nid(10)));
        // after k_r attempts, move to the second
        assert_eq!(failover_xr(&servers, 3, 3), Some(nid(11)));
        assert_eq!(failover_xr(&servers, 5, 3), Some(nid(11)));
        // all exhausted
        assert_eq!(failover_xr(&servers, 6, 3), None);
    }
}
