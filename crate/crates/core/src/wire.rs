//! Message frames exchanged between nodes, the modeled wire sizes used
//! for bandwidth accounting, and the host interface node programs run
//! against.
//!
//! Frames are tagged, length-prefixed binary in spirit; the simulator
//! passes them in memory and charges the modeled size. Document payloads
//! are charged `header + relays × per_relay_bytes` so synthetic scenarios
//! carry realistic vote sizes regardless of the synthetic entries' true
//! encoded length.

use std::sync::Arc;

use crate::agreement::AgreementMsg;
use crate::crypto::Signature;
use crate::dissemination::{DocumentMessage, Proposal, ProposalSlot, SlotProof};
use crate::types::{AuthorityId, Digest, StatusDocument};

/// Frame tags, fixed by the wire format.
pub mod tag {
    pub const DOCUMENT: u8 = 0x01;
    pub const PROPOSAL: u8 = 0x02;
    pub const AGREE_PROPOSE: u8 = 0x10;
    pub const AGREE_PREPARE: u8 = 0x11;
    pub const AGREE_COMMIT: u8 = 0x12;
    pub const AGREE_NEW_VIEW: u8 = 0x13;
    pub const FETCH_REQUEST: u8 = 0x20;
    pub const FETCH_RESPONSE: u8 = 0x21;
    pub const CONSENSUS_SIG: u8 = 0x30;
    pub const LEGACY_VOTE: u8 = 0x40;
    pub const LEGACY_VOTE_REQUEST: u8 = 0x41;
    pub const LEGACY_SIG: u8 = 0x42;
    pub const LEGACY_SIG_REQUEST: u8 = 0x43;
}

// Modeled sizes of the wire primitives (bytes).
const FRAME_HEADER: u64 = 19; // tag + epoch + view + sender + length
const SIG_BYTES: u64 = 66; // signature + signer id
const DIGEST_BYTES: u64 = 32;
const DOC_HEADER: u64 = 14; // author + epoch + relay count

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Frame {
    Document(DocumentMessage),
    Proposal(Proposal),
    Agreement(AgreementMsg),
    FetchRequest { slot: AuthorityId, digest: Digest },
    FetchResponse { slot: AuthorityId, doc: Option<Arc<StatusDocument>> },
    ConsensusSig { digest: Digest, sig: Signature },
    LegacyVote(DocumentMessage),
    LegacyVoteRequest { missing: Vec<AuthorityId> },
    LegacySig { digest: Digest, sig: Signature },
    LegacySigRequest,
}

fn doc_size(doc: &StatusDocument, per_relay_bytes: u64) -> u64 {
    DOC_HEADER + doc.relays.len() as u64 * per_relay_bytes
}

fn proof_size(proof: &SlotProof) -> u64 {
    match proof {
        SlotProof::Inclusion { sigs } | SlotProof::Exclusion { sigs } => {
            1 + 4 + sigs.len() as u64 * SIG_BYTES
        }
        SlotProof::Equivocation { .. } => 1 + 2 * (DIGEST_BYTES + SIG_BYTES),
    }
}

fn vector_size(vector: &crate::dissemination::DigestVector) -> u64 {
    let entries = vector.entries.len() as u64 * (1 + DIGEST_BYTES);
    let proofs: u64 = vector.proofs.iter().map(proof_size).sum();
    8 + 4 + entries + proofs
}

fn qc_size(qc: &crate::agreement::PrepareQc) -> u64 {
    8 + DIGEST_BYTES + 4 + qc.sigs.len() as u64 * SIG_BYTES
}

impl Frame {
    /// Modeled size on the wire, in bytes.
    pub fn wire_size(&self, per_relay_bytes: u64) -> u64 {
        FRAME_HEADER
            + match self {
                Frame::Document(m) | Frame::LegacyVote(m) => {
                    doc_size(&m.doc, per_relay_bytes) + DIGEST_BYTES + SIG_BYTES
                }
                Frame::Proposal(p) => {
                    let slots: u64 = p
                        .slots
                        .iter()
                        .map(|s| match s {
                            ProposalSlot::Present { .. } => 1 + DIGEST_BYTES + 2 * SIG_BYTES,
                            ProposalSlot::Absent { .. } => 1 + SIG_BYTES,
                        })
                        .sum();
                    let evidence =
                        p.evidence.len() as u64 * (2 + 2 * (DIGEST_BYTES + SIG_BYTES));
                    slots + evidence
                }
                Frame::Agreement(m) => match m {
                    AgreementMsg::Propose { vector, justify, .. } => {
                        vector_size(vector) + 1 + justify.as_ref().map_or(0, qc_size)
                    }
                    AgreementMsg::PrepareVote { .. } | AgreementMsg::CommitVote { .. } => {
                        8 + DIGEST_BYTES + SIG_BYTES
                    }
                    AgreementMsg::NewView { justify, .. } => {
                        8 + SIG_BYTES
                            + 1
                            + justify
                                .as_ref()
                                .map_or(0, |(qc, v)| qc_size(qc) + vector_size(v))
                    }
                },
                Frame::FetchRequest { .. } => 2 + DIGEST_BYTES,
                Frame::FetchResponse { doc, .. } => {
                    2 + 1 + doc.as_ref().map_or(0, |d| doc_size(d, per_relay_bytes))
                }
                Frame::ConsensusSig { .. } | Frame::LegacySig { .. } => DIGEST_BYTES + SIG_BYTES,
                Frame::LegacyVoteRequest { missing } => 4 + missing.len() as u64 * 2,
                Frame::LegacySigRequest => 0,
            }
    }

    /// Message class for byte accounting and round counting.
    pub fn class(&self) -> &'static str {
        match self {
            Frame::Document(_) => "document",
            Frame::Proposal(_) => "proposal",
            Frame::Agreement(AgreementMsg::Propose { .. }) => "agree_propose",
            Frame::Agreement(AgreementMsg::PrepareVote { .. }) => "agree_prepare",
            Frame::Agreement(AgreementMsg::CommitVote { .. }) => "agree_commit",
            Frame::Agreement(AgreementMsg::NewView { .. }) => "agree_new_view",
            Frame::FetchRequest { .. } => "fetch_request",
            Frame::FetchResponse { .. } => "fetch_response",
            Frame::ConsensusSig { .. } => "consensus_sig",
            Frame::LegacyVote(_) => "legacy_vote",
            Frame::LegacyVoteRequest { .. } => "legacy_vote_request",
            Frame::LegacySig { .. } => "legacy_sig",
            Frame::LegacySigRequest => "legacy_sig_request",
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Frame::Document(_) => tag::DOCUMENT,
            Frame::Proposal(_) => tag::PROPOSAL,
            Frame::Agreement(AgreementMsg::Propose { .. }) => tag::AGREE_PROPOSE,
            Frame::Agreement(AgreementMsg::PrepareVote { .. }) => tag::AGREE_PREPARE,
            Frame::Agreement(AgreementMsg::CommitVote { .. }) => tag::AGREE_COMMIT,
            Frame::Agreement(AgreementMsg::NewView { .. }) => tag::AGREE_NEW_VIEW,
            Frame::FetchRequest { .. } => tag::FETCH_REQUEST,
            Frame::FetchResponse { .. } => tag::FETCH_RESPONSE,
            Frame::ConsensusSig { .. } => tag::CONSENSUS_SIG,
            Frame::LegacyVote(_) => tag::LEGACY_VOTE,
            Frame::LegacyVoteRequest { .. } => tag::LEGACY_VOTE_REQUEST,
            Frame::LegacySig { .. } => tag::LEGACY_SIG,
            Frame::LegacySigRequest => tag::LEGACY_SIG_REQUEST,
        }
    }
}

/// Timers a node program can arm. The host fires them; programs filter
/// stale ones themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Timer {
    /// Document-wait Δ elapsed since epoch start.
    DocWait,
    /// View timer for the given view.
    View(u64),
    /// Leader grace after a NewView quorum, before proposing.
    NewViewGrace(u64),
    /// Re-issue outstanding fetch requests.
    FetchRetry,
    /// Hard round boundary of the legacy protocol (round index 1..=4).
    LegacyRound(u8),
}

/// Observable node-level events the host records into trace and metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeNote {
    GateOpen,
    ViewEntered(u64),
    Decided { view: u64, value: Digest, entries: Vec<Option<Digest>> },
    Finalized { digest: Digest, signatures: usize },
    LegacyOutcome { produced: bool, votes_held: usize, matching_sigs: usize },
}

/// Host interface node programs run against: simulated network, model
/// checker, or anything else that delivers events serially.
pub trait Host {
    fn now_us(&self) -> u64;
    fn send(&mut self, to: AuthorityId, frame: Frame);
    fn broadcast(&mut self, frame: Frame);
    fn set_timer(&mut self, timer: Timer, delay_us: u64);
    fn note(&mut self, note: NodeNote);
}

/// A deterministic per-node state machine; the host delivers each node's
/// events serially.
pub trait NodeProgram {
    fn on_init(&mut self, host: &mut dyn Host);
    fn on_frame(&mut self, host: &mut dyn Host, from: AuthorityId, frame: Frame);
    fn on_timer(&mut self, host: &mut dyn Host, timer: Timer);
    /// Finalized consensus document digest, once this node is done.
    fn finalized(&self) -> Option<Digest>;
    /// Whether this node has finished its run (finalized or given up).
    fn done(&self) -> bool;
    /// Messages this node dropped as invalid (bad signatures, digest
    /// mismatches, rejected proposals).
    fn invalid_dropped(&self) -> u64 {
        0
    }
    /// Consensus signatures observed over bytes different from this
    /// node's own aggregate.
    fn divergence(&self) -> u64 {
        0
    }
}
