//! Per-node protocol state machines: sources, receivers, the rotating token
//! site and its retransmit-server role, expressed as pure event handlers.

mod receiver;
mod source;

pub use receiver::{ReceiverState, TokenDecision};
pub use source::{SourceState, UnackedMessage};

use crate::time::SimTime;
use std::fmt;
use thiserror::Error;

/// Identity of a simulated node. Names live in the scenario's registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// A source message label: (source, per-source sequence number).
pub type Label = (NodeId, u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("emit_ack called by a node that does not hold the token")]
    NotTokenHolder,
    #[error("serve_retransmission called while not serving")]
    NotServing,
}

/// An application payload labeled with its source identity and per-source
/// sequence number. `identity_tag` stands in for the shared-secret source
/// authentication of the deployed system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceMessage {
    pub source: NodeId,
    pub source_seq: u64,
    pub payload: Vec<u8>,
    pub identity_tag: u64,
}

impl SourceMessage {
    pub fn label(&self) -> Label {
        (self.source, self.source_seq)
    }
}

/// The token-passing control message. One acknowledgement (1) assigns global
/// sequence numbers `base_global_seq .. base_global_seq + k - 1` to its
/// batch, (2) confirms the previous token handoff, and (3) transfers the
/// token to `next_site`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckMessage {
    pub token_num: u64,
    pub timestamp: SimTime,
    pub sender: NodeId,
    pub next_site: NodeId,
    pub base_global_seq: u64,
    pub acked: Vec<Label>,
}

impl AckMessage {
    pub fn batch_len(&self) -> u64 {
        self.acked.len() as u64
    }

    /// Global sequence assigned to the j-th batch entry.
    pub fn global_seq_of(&self, j: usize) -> u64 {
        self.base_global_seq + j as u64
    }
}

/// Protocol corruption detected while processing an acknowledgement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Corruption {
    /// A batch entry conflicts with an already-committed assignment.
    ConflictingAssignment { label: Label, committed_at: u64, acked_at: u64 },
    /// The batch base does not continue the committed global sequence.
    BaseMismatch { expected: u64, got: u64 },
}

/// Outcome of handling one protocol input. Exactly one alternative per event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Duplicate,
    Stored,
    /// Global sequence numbers committed by this acknowledgement.
    Committed(Vec<u64>),
    /// Acknowledgements `from ..= to` are missing (`to = None` when the gap
    /// was inferred from a source-sequence jump and the upper end is
    /// unknown; everything from `from` forward is requested).
    NeedAck { from: u64, to: Option<u64> },
    /// The listed acknowledged messages are absent; the triggering ack is
    /// buffered and reprocessed after recovery.
    NeedMessage(Vec<Label>),
    TriggerReformation(Corruption),
}

/// One recoverable item named in an explicit retransmission request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RecoveryItem {
    /// A single acknowledgement by token number.
    Ack(u64),
    /// Every acknowledgement from this token number forward.
    AcksFrom(u64),
    MessageByLabel(Label),
    MessageBySeq(u64),
}

/// One retransmitted item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecoveryReply {
    Ack(AckMessage),
    Message(SourceMessage),
    /// The item predates the server's retention window.
    NotRetained(RecoveryItem),
}

/// What provoked a retransmission: an explicit request from another
/// receiver, or an implicit one (a duplicate source message whose sender
/// missed the acknowledgement, or a repeated token pass whose sender missed
/// the handoff confirmation).
#[derive(Debug, Clone)]
pub enum RetransmitStimulus {
    Explicit(Vec<RecoveryItem>),
    DuplicateSourceMessage(SourceMessage),
    DuplicateTokenPass(AckMessage),
}

/// Stability watermarks once acknowledgement `t` exists in a ring of `m`:
/// every member provably holds everything through token `t - m + 1`, and
/// every member knows that every member holds everything through
/// `t - m + 2`. Clamped to 0 before the first full cycle.
pub fn stability_watermarks(t: u64, m: usize) -> (u64, u64) {
    let m = m as u64;
    debug_assert!(m >= 1);
    (
        (t + 1).saturating_sub(m),
        (t + 2).saturating_sub(m),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn watermarks_knowledge_chain() {
        assert_eq!(stability_watermarks(100, 10), (91, 92));
        assert_eq!(stability_watermarks(5, 10), (0, 0));
        assert_eq!(stability_watermarks(10, 10), (1, 2));
        assert_eq!(stability_watermarks(9, 10), (0, 1));
    }
}
