//! Wire messages, timer tags and the action vocabulary node handlers emit.

use crate::apps::book::PriceRule;
use crate::apps::AppKind;
use crate::protocol::{AckMessage, NodeId, RecoveryItem, RecoveryReply, SourceMessage};
use crate::reformation::{FailureReport, ReformationPolicy};
use crate::scenario::TradeFeed;
use crate::simnet::trace::TraceRecord;
use crate::time::{SimDuration, SimTime};
use crate::timing::TimingParams;
use std::collections::BTreeMap;

/// One record of the remulticast (release) stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReleasedRecord {
    pub global_seq: u64,
    pub source: NodeId,
    pub source_seq: u64,
    pub payload: Vec<u8>,
}

/// Ring-reformation announcement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewRingMsg {
    pub round: u64,
    pub members: Vec<NodeId>,
    pub start_token: u64,
    pub token_site: NodeId,
    pub epoch: SimTime,
}

/// Secondary-ring repair announcement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecRingUpdate {
    pub ring: u16,
    pub order: Vec<NodeId>,
    pub resume_n: u64,
    pub starter: NodeId,
}

/// Everything that travels between nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Wire {
    Source(SourceMessage),
    Ack(AckMessage),
    Request { from: NodeId, items: Vec<RecoveryItem> },
    Replies { items: Vec<RecoveryReply> },
    /// Retransmission multicast to the whole group (NACK-suppression mode).
    Retrans { items: Vec<RecoveryReply> },
    SecToken { ring: u16, n: u64, from: NodeId },
    SecTokenAck { ring: u16, n: u64 },
    RegionBatch { rt: NodeId, token: u64, base: u64, records: Vec<ReleasedRecord> },
    EdgeRequest { from: NodeId, seqs: Vec<u64> },
    EdgeReply { records: Vec<ReleasedRecord>, not_retained: Vec<u64> },
    Report(FailureReport),
    ReportAck,
    Invitation { xr: NodeId, round: u64 },
    Join { from: NodeId, t_r: u64, round: u64 },
    JoinAck { round: u64 },
    NewRing(NewRingMsg),
    SecRing(SecRingUpdate),
    /// Customers whose region R_T died switch to their fallback at once.
    ScopeUpdate { dead: Vec<NodeId> },
}

/// Node-local timers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerTag {
    TokenEmit { token: u64 },
    AckWatchdog { token: u64 },
    RequestRetry,
    Release { token: u64 },
    SourceRetry,
    SecRetry { n: u64 },
    FallbackCheck,
    EdgeRetry,
    InviteSend { round: u64 },
    JoinWindow { round: u64 },
    JoinRetry { round: u64 },
    ReportRetry,
}

/// What a handler asks the engine to do.
#[derive(Debug, Clone)]
pub enum Action {
    /// Multicast on the global tree from this node.
    Multicast(Wire, crate::simnet::LossKey),
    /// Multicast on this R_T's region tree.
    Region(Wire, crate::simnet::LossKey),
    Unicast(NodeId, Wire),
    Timer(SimTime, TimerTag),
    Trace(TraceRecord),
    TotalFailure,
}

/// Immutable per-run configuration shared by every handler.
#[derive(Debug, Clone)]
pub struct RunCfg {
    pub timing: TimingParams,
    pub k_cap: usize,
    pub nack_enabled: bool,
    pub k_p: usize,
    pub app: AppKind,
    pub price_rule: PriceRule,
    pub trade_feed: TradeFeed,
    pub policy: ReformationPolicy,
    pub start_token_plus_one: bool,
    pub xr_order: Vec<NodeId>,
    pub names: BTreeMap<NodeId, String>,
    pub join_window: SimDuration,
}

impl RunCfg {
    pub fn name(&self, id: NodeId) -> &str {
        self.names.get(&id).map(String::as_str).unwrap_or("?")
    }

    pub fn tau_t(&self) -> SimDuration {
        self.timing.tau_t
    }

    pub fn tau_r(&self) -> SimDuration {
        self.timing.tau_r
    }

    pub fn delta_n(&self) -> SimDuration {
        self.timing.delta_n
    }

    pub fn delta_a(&self) -> SimDuration {
        self.timing.delta_a
    }

    pub fn k_r(&self) -> u32 {
        self.timing.k_r
    }
}

/// Compact encoding of recovery items for trace records.
pub fn item_to_str(item: &RecoveryItem, names: &BTreeMap<NodeId, String>) -> String {
    let name = |id: &NodeId| names.get(id).cloned().unwrap_or_else(|| id.to_string());
    match item {
        RecoveryItem::Ack(t) => format!("a{t}"),
        RecoveryItem::AcksFrom(t) => format!("f{t}"),
        RecoveryItem::MessageByLabel((s, q)) => format!("m{}:{q}", name(s)),
        RecoveryItem::MessageBySeq(g) => format!("g{g}"),
    }
}

/// Labels rendered for EMIT trace records: `src:seq;src:seq;...`.
pub fn labels_to_str(labels: &[(NodeId, u64)], names: &BTreeMap<NodeId, String>) -> String {
    labels
        .iter()
        .map(|(s, q)| format!("{}:{q}", names.get(s).map(String::as_str).unwrap_or("?")))
        .collect::<Vec<_>>()
        .join(";")
}

/// Hash binding a commit to the exact batch it applied (token numbers can
/// recur across reformations).
pub fn batch_hash(base: u64, labels: &[(NodeId, u64)]) -> u64 {
    let mut h = crate::simnet::fnv1a(&base.to_le_bytes());
    for (s, q) in labels {
        h ^= crate::simnet::fnv1a(&(s.0 as u64).to_le_bytes()).rotate_left(9);
        h = h.wrapping_mul(0x100000001b3).wrapping_add(*q);
    }
    h
}
