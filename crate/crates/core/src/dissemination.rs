//! Document dissemination: broadcast, per-view proposals to the leader,
//! and the leader's assembly of a proof-carrying digest vector.
//!
//! Per slot the assembled vector carries either a digest backed by an
//! inclusion proof (f+1 proposer signatures, so at least one correct node
//! holds the full document) or ⊥ backed by an equivocation proof (two
//! digests signed by the slot owner) or an exclusion proof (f+1 absence
//! signatures, so an adversarial leader cannot exclude correct nodes when
//! the network never lost synchrony).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::codec::document_digest;
use crate::crypto::{Context, KeyStore, Signature};
use crate::types::{AuthorityId, Digest, StatusDocument};

/// Signing payload for a slot claim: owner index followed by the digest.
pub fn slot_payload(slot: AuthorityId, digest: &Digest) -> Vec<u8> {
    let mut p = Vec::with_capacity(2 + 32);
    p.extend_from_slice(&slot.0.to_be_bytes());
    p.extend_from_slice(&digest.0);
    p
}

/// Signing payload for an absence claim: the owner index alone; the
/// context tag carries the ⊥.
pub fn absent_payload(slot: AuthorityId) -> Vec<u8> {
    slot.0.to_be_bytes().to_vec()
}

/// `⟨DOCUMENT, d, h, σ_author(author ∥ h)⟩`
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DocumentMessage {
    pub doc: Arc<StatusDocument>,
    pub digest: Digest,
    pub sig: Signature,
}

impl DocumentMessage {
    /// Build the broadcast message for one's own canonical document.
    pub fn build(keys: &KeyStore, epoch: u64, doc: Arc<StatusDocument>) -> Self {
        let digest = document_digest(&doc).expect("own document must be canonical");
        let sig = keys.sign(doc.author, Context::Document, epoch, &slot_payload(doc.author, &digest));
        DocumentMessage { doc, digest, sig }
    }

    /// Adversarial input allowed: checks canonical form, digest match and
    /// the author's signature.
    pub fn validate(&self, keys: &KeyStore, epoch: u64) -> bool {
        self.doc.author.index() < keys.n() as usize
            && self.doc.is_canonical()
            && document_digest(&self.doc).map(|h| h == self.digest).unwrap_or(false)
            && self.sig.signer == self.doc.author
            && keys.verify(
                Context::Document,
                epoch,
                &slot_payload(self.doc.author, &self.digest),
                &self.sig,
            )
    }
}

/// Two digests signed by the same sender in one epoch: proof of
/// equivocation usable by any verifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EquivocationEvidence {
    pub slot: AuthorityId,
    pub digests: (Digest, Digest),
    pub sigs: (Signature, Signature),
}

impl EquivocationEvidence {
    pub fn validate(&self, keys: &KeyStore, epoch: u64) -> bool {
        self.digests.0 != self.digests.1
            && self.sigs.0.signer == self.slot
            && self.sigs.1.signer == self.slot
            && keys.verify(Context::Document, epoch, &slot_payload(self.slot, &self.digests.0), &self.sigs.0)
            && keys.verify(Context::Document, epoch, &slot_payload(self.slot, &self.digests.1), &self.sigs.1)
    }
}

/// One slot of a proposal: the slot owner's digest counter-signed by the
/// proposer, or a signed absence claim.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ProposalSlot {
    Present {
        digest: Digest,
        /// Owner's own `(DOCUMENT, j ∥ h)` signature, relayed.
        sender_sig: Signature,
        /// Proposer's `(PROPOSAL-SLOT, j ∥ h)` signature.
        proposer_sig: Signature,
    },
    Absent {
        /// Proposer's `(ABSENT-SLOT, j)` signature.
        proposer_sig: Signature,
    },
}

/// One node's signed view of which documents it received, re-sent to the
/// leader at the start of every view. Equivocation evidence rides along
/// so the leader can justify ⊥ entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Proposal {
    pub proposer: AuthorityId,
    pub view: u64,
    pub slots: Vec<ProposalSlot>,
    pub evidence: Vec<EquivocationEvidence>,
}

impl Proposal {
    pub fn present_count(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, ProposalSlot::Present { .. })).count()
    }

    /// Full validation; an invalid slot signature rejects the whole
    /// proposal.
    pub fn validate(&self, keys: &KeyStore, epoch: u64, n: u16, f: u16) -> bool {
        if self.proposer.index() >= n as usize || self.slots.len() != n as usize {
            return false;
        }
        if self.present_count() < (n - f) as usize {
            return false;
        }
        for (j, slot) in self.slots.iter().enumerate() {
            let owner = AuthorityId(j as u16);
            match slot {
                ProposalSlot::Present { digest, sender_sig, proposer_sig } => {
                    if sender_sig.signer != owner
                        || proposer_sig.signer != self.proposer
                        || !keys.verify(Context::Document, epoch, &slot_payload(owner, digest), sender_sig)
                        || !keys.verify(Context::ProposalSlot, epoch, &slot_payload(owner, digest), proposer_sig)
                    {
                        return false;
                    }
                }
                ProposalSlot::Absent { proposer_sig } => {
                    if proposer_sig.signer != self.proposer
                        || !keys.verify(Context::AbsentSlot, epoch, &absent_payload(owner), proposer_sig)
                    {
                        return false;
                    }
                }
            }
        }
        self.evidence.iter().all(|ev| ev.validate(keys, epoch))
    }
}

/// Externally verifiable justification for one digest-vector entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SlotProof {
    /// f+1 distinct proposers counter-signed the same digest.
    Inclusion { sigs: Vec<Signature> },
    /// The slot owner signed two different digests.
    Equivocation { digests: (Digest, Digest), sigs: (Signature, Signature) },
    /// f+1 distinct proposers signed the absence claim.
    Exclusion { sigs: Vec<Signature> },
}

/// The `(H, π)` pair: per-slot digest or ⊥ plus its proof.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DigestVector {
    pub view: u64,
    pub entries: Vec<Option<Digest>>,
    pub proofs: Vec<SlotProof>,
}

impl DigestVector {
    pub fn non_bottom(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    /// The agreement value for this vector: digest of the entries only.
    pub fn value(&self) -> Digest {
        crate::codec::entries_digest(&self.entries)
    }

    /// Proposers named in the inclusion proof for a slot; at least one of
    /// them is correct and holds the full document.
    pub fn inclusion_signers(&self, slot: usize) -> Vec<AuthorityId> {
        match &self.proofs[slot] {
            SlotProof::Inclusion { sigs } => sigs.iter().map(|s| s.signer).collect(),
            _ => Vec::new(),
        }
    }
}

/// Check every invariant of a digest vector against adversarial input:
/// proof signatures under the correct contexts, distinct signer sets of
/// size exactly f+1, differing owner-signed digests for equivocations,
/// and the n−f readiness bound.
pub fn verify_vector(keys: &KeyStore, epoch: u64, vector: &DigestVector, n: u16, f: u16) -> bool {
    if vector.entries.len() != n as usize || vector.proofs.len() != n as usize {
        return false;
    }
    if vector.non_bottom() < (n - f) as usize {
        return false;
    }
    for (j, (entry, proof)) in vector.entries.iter().zip(&vector.proofs).enumerate() {
        let owner = AuthorityId(j as u16);
        match (entry, proof) {
            (Some(digest), SlotProof::Inclusion { sigs }) => {
                if !distinct_signers(sigs, f + 1) {
                    return false;
                }
                let payload = slot_payload(owner, digest);
                if !sigs.iter().all(|s| keys.verify(Context::ProposalSlot, epoch, &payload, s)) {
                    return false;
                }
            }
            (None, SlotProof::Equivocation { digests, sigs }) => {
                let ev = EquivocationEvidence {
                    slot: owner,
                    digests: *digests,
                    sigs: sigs.clone(),
                };
                if !ev.validate(keys, epoch) {
                    return false;
                }
            }
            (None, SlotProof::Exclusion { sigs }) => {
                if !distinct_signers(sigs, f + 1) {
                    return false;
                }
                let payload = absent_payload(owner);
                if !sigs.iter().all(|s| keys.verify(Context::AbsentSlot, epoch, &payload, s)) {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

fn distinct_signers(sigs: &[Signature], expected: u16) -> bool {
    if sigs.len() != expected as usize {
        return false;
    }
    let mut seen = std::collections::BTreeSet::new();
    sigs.iter().all(|s| seen.insert(s.signer))
}

/// Outcome of feeding one DOCUMENT message into the receive state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocReceipt {
    /// First valid document from this sender.
    Stored,
    /// Same digest seen before; nothing new.
    Duplicate,
    /// Second digest from the same sender; evidence recorded.
    Equivocation,
    /// Bad signature or digest mismatch; dropped.
    Invalid,
}

/// Per-node dissemination state: received documents, equivocation
/// evidence, and proposal construction.
#[derive(Debug)]
pub struct DisseminationState {
    pub me: AuthorityId,
    pub n: u16,
    pub f: u16,
    pub epoch: u64,
    /// Retained document variants per sender (one, or two once the sender
    /// equivocated; later variants add evidence but are not stored).
    docs: BTreeMap<AuthorityId, Vec<DocumentMessage>>,
    equivocations: BTreeMap<AuthorityId, EquivocationEvidence>,
    pub dropped_invalid: u64,
}

impl DisseminationState {
    /// Set up state holding one's own document, and the DOCUMENT message
    /// to broadcast for it.
    pub fn start_epoch(
        keys: &KeyStore,
        me: AuthorityId,
        n: u16,
        f: u16,
        epoch: u64,
        own_doc: Arc<StatusDocument>,
    ) -> (Self, DocumentMessage) {
        assert_eq!(own_doc.author, me, "own document must be authored by this node");
        let msg = DocumentMessage::build(keys, epoch, own_doc);
        let mut docs = BTreeMap::new();
        docs.insert(me, vec![msg.clone()]);
        let state = DisseminationState {
            me,
            n,
            f,
            epoch,
            docs,
            equivocations: BTreeMap::new(),
            dropped_invalid: 0,
        };
        (state, msg)
    }

    pub fn on_document(&mut self, keys: &KeyStore, msg: DocumentMessage) -> DocReceipt {
        if !msg.validate(keys, self.epoch) {
            self.dropped_invalid += 1;
            return DocReceipt::Invalid;
        }
        let sender = msg.doc.author;
        let variants = self.docs.entry(sender).or_default();
        if let Some(first) = variants.first() {
            if first.digest == msg.digest
                || variants.iter().any(|m| m.digest == msg.digest)
            {
                return DocReceipt::Duplicate;
            }
            // both (h, σ) pairs are retained as evidence
            self.equivocations.entry(sender).or_insert_with(|| EquivocationEvidence {
                slot: sender,
                digests: (first.digest, msg.digest),
                sigs: (first.sig.clone(), msg.sig.clone()),
            });
            if variants.len() < 2 {
                variants.push(msg);
            }
            return DocReceipt::Equivocation;
        }
        variants.push(msg);
        DocReceipt::Stored
    }

    /// Record evidence learned from a peer's proposal.
    pub fn add_evidence(&mut self, keys: &KeyStore, ev: EquivocationEvidence) {
        if ev.validate(keys, self.epoch) {
            self.equivocations.entry(ev.slot).or_insert(ev);
        }
    }

    /// Senders with exactly one observed digest; equivocators do not count
    /// as valid documents.
    pub fn valid_count(&self) -> usize {
        self.docs.keys().filter(|s| !self.equivocations.contains_key(s)).count()
    }

    /// A node proposes once it has all n documents, or the timeout passed
    /// and it has at least n−f.
    pub fn proposal_gate(&self, delta_elapsed: bool) -> bool {
        let have = self.valid_count();
        have == self.n as usize || (delta_elapsed && have >= (self.n - self.f) as usize)
    }

    pub fn document(&self, slot: AuthorityId, digest: &Digest) -> Option<Arc<StatusDocument>> {
        self.docs
            .get(&slot)?
            .iter()
            .find(|m| m.digest == *digest)
            .map(|m| m.doc.clone())
    }

    pub fn any_document(&self, slot: AuthorityId) -> Option<&DocumentMessage> {
        self.docs.get(&slot).and_then(|v| v.first())
    }

    pub fn equivocation(&self, slot: AuthorityId) -> Option<&EquivocationEvidence> {
        self.equivocations.get(&slot)
    }

    /// Build this node's proposal for a view. Refuses while the gate is
    /// closed.
    pub fn build_proposal(
        &self,
        keys: &KeyStore,
        view: u64,
        delta_elapsed: bool,
    ) -> Option<Proposal> {
        if !self.proposal_gate(delta_elapsed) {
            return None;
        }
        let mut slots = Vec::with_capacity(self.n as usize);
        for owner in AuthorityId::all(self.n) {
            let usable = if self.equivocations.contains_key(&owner) {
                None
            } else {
                self.docs.get(&owner).and_then(|v| v.first())
            };
            match usable {
                Some(msg) => {
                    let proposer_sig = keys.sign(
                        self.me,
                        Context::ProposalSlot,
                        self.epoch,
                        &slot_payload(owner, &msg.digest),
                    );
                    slots.push(ProposalSlot::Present {
                        digest: msg.digest,
                        sender_sig: msg.sig.clone(),
                        proposer_sig,
                    });
                }
                None => {
                    let proposer_sig =
                        keys.sign(self.me, Context::AbsentSlot, self.epoch, &absent_payload(owner));
                    slots.push(ProposalSlot::Absent { proposer_sig });
                }
            }
        }
        Some(Proposal {
            proposer: self.me,
            view,
            slots,
            evidence: self.equivocations.values().cloned().collect(),
        })
    }
}

/// Assembly outcome for one leader view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assembly {
    Ready(DigestVector),
    NotReady,
}

/// The leader's per-view collection of proposals and evidence.
#[derive(Debug)]
pub struct LeaderAssembly {
    pub view: u64,
    n: u16,
    f: u16,
    epoch: u64,
    proposals: BTreeMap<AuthorityId, Proposal>,
    evidence: BTreeMap<AuthorityId, EquivocationEvidence>,
    pub rejected: u64,
}

impl LeaderAssembly {
    pub fn new(view: u64, n: u16, f: u16, epoch: u64) -> Self {
        LeaderAssembly {
            view,
            n,
            f,
            epoch,
            proposals: BTreeMap::new(),
            evidence: BTreeMap::new(),
            rejected: 0,
        }
    }

    /// Validate and record a proposal; a duplicate proposer's later
    /// proposal is ignored.
    pub fn add_proposal(&mut self, keys: &KeyStore, proposal: Proposal) -> bool {
        if proposal.view != self.view || !proposal.validate(keys, self.epoch, self.n, self.f) {
            self.rejected += 1;
            return false;
        }
        if self.proposals.contains_key(&proposal.proposer) {
            return false;
        }
        for ev in &proposal.evidence {
            self.evidence.entry(ev.slot).or_insert_with(|| ev.clone());
        }
        self.proposals.insert(proposal.proposer, proposal);
        true
    }

    /// Evidence the leader holds directly (from its own receive state).
    pub fn add_evidence(&mut self, keys: &KeyStore, ev: EquivocationEvidence) {
        if ev.validate(keys, self.epoch) {
            self.evidence.entry(ev.slot).or_insert(ev);
        }
    }

    pub fn proposal_count(&self) -> usize {
        self.proposals.len()
    }

    /// Assemble `(H, π)` from the proposals received so far.
    ///
    /// Per slot, equivocation evidence wins, then f+1 matching digests,
    /// then f+1 absence claims; a slot with none of these leaves the
    /// assembly NotReady and the leader waits for more proposals. Cross-
    /// proposal digest conflicts for one owner are themselves
    /// equivocation evidence (the two relayed sender signatures form the
    /// proof).
    pub fn try_assemble(&self) -> Assembly {
        if self.proposals.len() < (self.n - self.f) as usize {
            return Assembly::NotReady;
        }
        let mut entries = Vec::with_capacity(self.n as usize);
        let mut proofs = Vec::with_capacity(self.n as usize);
        for owner in AuthorityId::all(self.n) {
            let j = owner.index();
            // digest → (sender_sig, proposer sigs by proposer order)
            let mut by_digest: BTreeMap<Digest, (Signature, Vec<Signature>)> = BTreeMap::new();
            let mut absent_sigs: Vec<Signature> = Vec::new();
            for proposal in self.proposals.values() {
                match &proposal.slots[j] {
                    ProposalSlot::Present { digest, sender_sig, proposer_sig } => {
                        by_digest
                            .entry(*digest)
                            .or_insert_with(|| (sender_sig.clone(), Vec::new()))
                            .1
                            .push(proposer_sig.clone());
                    }
                    ProposalSlot::Absent { proposer_sig } => {
                        absent_sigs.push(proposer_sig.clone());
                    }
                }
            }
            let evidence = self.evidence.get(&owner).cloned().or_else(|| {
                // two differing owner-signed digests across proposals
                let mut it = by_digest.iter();
                match (it.next(), it.next()) {
                    (Some((h1, (s1, _))), Some((h2, (s2, _)))) => Some(EquivocationEvidence {
                        slot: owner,
                        digests: (*h1, *h2),
                        sigs: (s1.clone(), s2.clone()),
                    }),
                    _ => None,
                }
            });
            if let Some(ev) = evidence {
                entries.push(None);
                proofs.push(SlotProof::Equivocation { digests: ev.digests, sigs: ev.sigs });
                continue;
            }
            let included = by_digest
                .iter()
                .find(|(_, (_, sigs))| sigs.len() >= (self.f + 1) as usize);
            if let Some((digest, (_, sigs))) = included {
                entries.push(Some(*digest));
                proofs.push(SlotProof::Inclusion {
                    sigs: sigs.iter().take((self.f + 1) as usize).cloned().collect(),
                });
                continue;
            }
            if absent_sigs.len() >= (self.f + 1) as usize {
                entries.push(None);
                proofs.push(SlotProof::Exclusion {
                    sigs: absent_sigs.into_iter().take((self.f + 1) as usize).collect(),
                });
                continue;
            }
            // undecided: wait for more proposals
            return Assembly::NotReady;
        }
        let vector = DigestVector { view: self.view, entries, proofs };
        if vector.non_bottom() < (self.n - self.f) as usize {
            return Assembly::NotReady;
        }
        Assembly::Ready(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SchemeKind;
    use crate::types::StatusDocument;

    fn doc(author: u16, epoch: u64, tag: u8) -> Arc<StatusDocument> {
        let relay = crate::types::RelayDescriptor {
            fingerprint: crate::types::Fingerprint(vec![tag, author as u8]),
            nickname: format!("r{author}"),
            flags: Default::default(),
            version: "1".into(),
            protocols: "Link=1".into(),
            exit_policy_summary: "reject 1-65535".into(),
            bandwidth: Some(100 + author as u64),
            measured: true,
        };
        Arc::new(StatusDocument::new(AuthorityId(author), epoch, vec![relay]).unwrap())
    }

    fn cluster(n: u16) -> KeyStore {
        KeyStore::generate(n, SchemeKind::Mac, 1)
    }

    struct Net {
        keys: KeyStore,
        states: Vec<DisseminationState>,
        msgs: Vec<DocumentMessage>,
    }

    fn setup(n: u16, f: u16) -> Net {
        let keys = cluster(n);
        let mut states = Vec::new();
        let mut msgs = Vec::new();
        for i in 0..n {
            let (st, msg) = DisseminationState::start_epoch(&keys, AuthorityId(i), n, f, 1, doc(i, 1, 0));
            states.push(st);
            msgs.push(msg);
        }
        Net { keys, states, msgs }
    }

    #[test]
    fn start_epoch_message_is_valid() {
        let net = setup(4, 1);
        for msg in &net.msgs {
            assert!(msg.validate(&net.keys, 1));
            assert!(!msg.validate(&net.keys, 2), "epoch binding");
        }
    }

    #[test]
    fn on_document_stores_and_drops() {
        let mut net = setup(4, 1);
        let msg = net.msgs[1].clone();
        assert_eq!(net.states[0].on_document(&net.keys, msg.clone()), DocReceipt::Stored);
        assert_eq!(net.states[0].on_document(&net.keys, msg.clone()), DocReceipt::Duplicate);
        assert_eq!(net.states[0].valid_count(), 2);

        let mut tampered = msg;
        tampered.digest = crate::codec::hash(b"oops");
        assert_eq!(net.states[0].on_document(&net.keys, tampered), DocReceipt::Invalid);
        assert_eq!(net.states[0].dropped_invalid, 1);
    }

    #[test]
    fn equivocation_evidence_is_recorded() {
        let mut net = setup(4, 1);
        let first = net.msgs[2].clone();
        let second = DocumentMessage::build(&net.keys, 1, doc(2, 1, 9));
        assert_ne!(first.digest, second.digest);
        assert_eq!(net.states[0].on_document(&net.keys, first.clone()), DocReceipt::Stored);
        assert_eq!(net.states[0].on_document(&net.keys, second.clone()), DocReceipt::Equivocation);
        let ev = net.states[0].equivocation(AuthorityId(2)).unwrap().clone();
        assert!(ev.validate(&net.keys, 1));
        assert_eq!(
            {
                let mut pair = [ev.digests.0, ev.digests.1];
                pair.sort();
                pair
            },
            {
                let mut pair = [first.digest, second.digest];
                pair.sort();
                pair
            }
        );
        // equivocator no longer counts toward the gate
        assert_eq!(net.states[0].valid_count(), 1);
    }

    #[test]
    fn proposal_gate_conditions() {
        // n=9, f=2: all received opens instantly; n−f needs the timeout
        let mut net = setup(9, 2);
        for j in 1..7 {
            let msg = net.msgs[j].clone();
            net.states[0].on_document(&net.keys, msg);
        }
        assert_eq!(net.states[0].valid_count(), 7);
        assert!(!net.states[0].proposal_gate(false));
        assert!(net.states[0].proposal_gate(true));
        for j in 7..9 {
            let msg = net.msgs[j].clone();
            net.states[0].on_document(&net.keys, msg);
        }
        assert!(net.states[0].proposal_gate(false), "all n received");
    }

    #[test]
    fn build_proposal_marks_absent_and_attaches_evidence() {
        let mut net = setup(4, 1);
        let m1 = net.msgs[1].clone();
        let m2 = net.msgs[2].clone();
        net.states[0].on_document(&net.keys, m1);
        net.states[0].on_document(&net.keys, m2);
        assert!(net.states[0].build_proposal(&net.keys, 0, false).is_none(), "gate closed");
        let p = net.states[0].build_proposal(&net.keys, 0, true).unwrap();
        assert_eq!(p.present_count(), 3);
        assert!(matches!(p.slots[3], ProposalSlot::Absent { .. }));
        assert!(p.validate(&net.keys, 1, 4, 1));

        // an equivocating sender's slot goes absent with evidence attached
        let second = DocumentMessage::build(&net.keys, 1, doc(1, 1, 7));
        net.states[0].on_document(&net.keys, second);
        let m3 = net.msgs[3].clone();
        net.states[0].on_document(&net.keys, m3);
        let p = net.states[0].build_proposal(&net.keys, 1, true).unwrap();
        assert!(matches!(p.slots[1], ProposalSlot::Absent { .. }));
        assert_eq!(p.evidence.len(), 1);
        assert_eq!(p.evidence[0].slot, AuthorityId(1));
    }

    /// Deliver everything everywhere, collect proposals at one leader.
    fn full_exchange(net: &mut Net, view: u64) -> LeaderAssembly {
        let n = net.states.len();
        for i in 0..n {
            for msg in net.msgs.clone() {
                if msg.doc.author.index() != i {
                    net.states[i].on_document(&net.keys, msg);
                }
            }
        }
        let mut assembly = LeaderAssembly::new(view, n as u16, net.states[0].f, 1);
        for st in &net.states {
            let p = st.build_proposal(&net.keys, view, true).unwrap();
            assert!(assembly.add_proposal(&net.keys, p));
        }
        assembly
    }

    #[test]
    fn assemble_happy_path_and_verify_round_trip() {
        let mut net = setup(4, 1);
        let assembly = full_exchange(&mut net, 0);
        let Assembly::Ready(vector) = assembly.try_assemble() else {
            panic!("expected ready");
        };
        assert_eq!(vector.non_bottom(), 4);
        for j in 0..4 {
            assert!(matches!(vector.proofs[j], SlotProof::Inclusion { ref sigs } if sigs.len() == 2));
        }
        assert!(verify_vector(&net.keys, 1, &vector, 4, 1));
    }

    #[test]
    fn assemble_inclusion_with_partial_proposals() {
        // proposals from {0,1,2} only; slot 3 is present in all of them
        let mut net = setup(4, 1);
        let n = net.states.len();
        for i in 0..n {
            for msg in net.msgs.clone() {
                net.states[i].on_document(&net.keys, msg);
            }
        }
        let mut assembly = LeaderAssembly::new(0, 4, 1, 1);
        for st in net.states.iter().take(3) {
            assembly.add_proposal(&net.keys, st.build_proposal(&net.keys, 0, true).unwrap());
        }
        let Assembly::Ready(vector) = assembly.try_assemble() else {
            panic!("expected ready");
        };
        assert_eq!(vector.entries[2], Some(net.msgs[2].digest));
        assert!(matches!(vector.proofs[2], SlotProof::Inclusion { ref sigs } if sigs.len() == 2));
    }

    #[test]
    fn assemble_exclusion_of_silent_node() {
        // node 3 silent: nobody holds its document
        let mut net = setup(4, 1);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let msg = net.msgs[j].clone();
                    net.states[i].on_document(&net.keys, msg);
                }
            }
        }
        let mut assembly = LeaderAssembly::new(0, 4, 1, 1);
        for st in net.states.iter().take(3) {
            assembly.add_proposal(&net.keys, st.build_proposal(&net.keys, 0, true).unwrap());
        }
        let Assembly::Ready(vector) = assembly.try_assemble() else {
            panic!("expected ready");
        };
        assert_eq!(vector.entries[3], None);
        assert!(matches!(vector.proofs[3], SlotProof::Exclusion { ref sigs } if sigs.len() == 2));
        assert!(verify_vector(&net.keys, 1, &vector, 4, 1));
    }

    #[test]
    fn assemble_equivocation_beats_inclusion() {
        // all correct nodes hold a digest for slot 1, but evidence exists
        let mut net = setup(4, 1);
        let mut assembly = full_exchange(&mut net, 0);
        let second = DocumentMessage::build(&net.keys, 1, doc(1, 1, 9));
        assembly.add_evidence(
            &net.keys,
            EquivocationEvidence {
                slot: AuthorityId(1),
                digests: (net.msgs[1].digest, second.digest),
                sigs: (net.msgs[1].sig.clone(), second.sig.clone()),
            },
        );
        let Assembly::Ready(vector) = assembly.try_assemble() else {
            panic!("expected ready");
        };
        assert_eq!(vector.entries[1], None);
        assert!(matches!(vector.proofs[1], SlotProof::Equivocation { .. }));
        assert!(verify_vector(&net.keys, 1, &vector, 4, 1));
    }

    #[test]
    fn cross_proposal_equivocation_detected() {
        // sender 1 equivocated at the document layer: different proposers
        // relay different owner-signed digests; the leader never saw the
        // raw documents
        let net = setup(4, 1);
        let keys = &net.keys;
        let alt = DocumentMessage::build(keys, 1, doc(1, 1, 9));

        let mut states: Vec<DisseminationState> = Vec::new();
        for i in [0u16, 2, 3] {
            let (mut st, _) =
                DisseminationState::start_epoch(keys, AuthorityId(i), 4, 1, 1, doc(i, 1, 0));
            for j in [0u16, 2, 3] {
                if j != i {
                    st.on_document(keys, net.msgs[j.index()].clone());
                }
            }
            // node 0 saw the alt variant, nodes 2 and 3 the original
            if i == 0 {
                st.on_document(keys, alt.clone());
            } else {
                st.on_document(keys, net.msgs[1].clone());
            }
            states.push(st);
        }
        let mut assembly = LeaderAssembly::new(0, 4, 1, 1);
        for st in &states {
            assembly.add_proposal(keys, st.build_proposal(keys, 0, true).unwrap());
        }
        let Assembly::Ready(vector) = assembly.try_assemble() else {
            panic!("expected ready");
        };
        assert_eq!(vector.entries[1], None);
        assert!(matches!(vector.proofs[1], SlotProof::Equivocation { .. }));
        assert!(verify_vector(keys, 1, &vector, 4, 1));
    }

    #[test]
    fn not_ready_with_too_few_resolvable_slots() {
        // only proposals from 2 of 4 nodes: below n−f
        let mut net = setup(4, 1);
        let n = net.states.len();
        for i in 0..n {
            for msg in net.msgs.clone() {
                net.states[i].on_document(&net.keys, msg);
            }
        }
        let mut assembly = LeaderAssembly::new(0, 4, 1, 1);
        for st in net.states.iter().take(2) {
            assembly.add_proposal(&net.keys, st.build_proposal(&net.keys, 0, true).unwrap());
        }
        assert_eq!(assembly.try_assemble(), Assembly::NotReady);
    }

    #[test]
    fn undecided_slot_blocks_readiness() {
        // 3 proposals: slot 3 present in one, absent in two → 2 absents
        // meet f+1, but present in two, absent in one → undecided
        let mut net = setup(4, 1);
        // nodes 0 and 1 hold doc 3; node 2 does not
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let msg = net.msgs[j].clone();
                    net.states[i].on_document(&net.keys, msg);
                }
            }
        }
        let m3a = net.msgs[3].clone();
        let m3b = net.msgs[3].clone();
        net.states[0].on_document(&net.keys, m3a);
        net.states[1].on_document(&net.keys, m3b);
        let mut assembly = LeaderAssembly::new(0, 4, 1, 1);
        for st in net.states.iter().take(3) {
            assembly.add_proposal(&net.keys, st.build_proposal(&net.keys, 0, true).unwrap());
        }
        assert_eq!(assembly.try_assemble(), Assembly::NotReady);
    }

    #[test]
    fn verify_vector_rejects_tampering() {
        let mut net = setup(4, 1);
        let assembly = full_exchange(&mut net, 0);
        let Assembly::Ready(vector) = assembly.try_assemble() else {
            panic!();
        };
        // drop one signature from an inclusion proof
        let mut short = vector.clone();
        if let SlotProof::Inclusion { sigs } = &mut short.proofs[0] {
            sigs.pop();
        }
        assert!(!verify_vector(&net.keys, 1, &short, 4, 1));

        // duplicate signer instead of distinct
        let mut dup = vector.clone();
        if let SlotProof::Inclusion { sigs } = &mut dup.proofs[0] {
            sigs[1] = sigs[0].clone();
        }
        assert!(!verify_vector(&net.keys, 1, &dup, 4, 1));

        // readiness bound: blank out entries down to n−f−1
        let mut sparse = vector.clone();
        sparse.entries[0] = None;
        sparse.entries[1] = None;
        assert!(sparse.non_bottom() < 3);
        assert!(!verify_vector(&net.keys, 1, &sparse, 4, 1));

        // wrong epoch
        assert!(!verify_vector(&net.keys, 2, &vector, 4, 1));
    }

    #[test]
    fn proposal_with_invalid_slot_sig_rejected_entirely() {
        let mut net = setup(4, 1);
        let n = net.states.len();
        for i in 0..n {
            for msg in net.msgs.clone() {
                net.states[i].on_document(&net.keys, msg);
            }
        }
        let mut p = net.states[1].build_proposal(&net.keys, 0, true).unwrap();
        if let ProposalSlot::Present { proposer_sig, .. } = &mut p.slots[2] {
            proposer_sig.bytes[0] ^= 1;
        }
        let mut assembly = LeaderAssembly::new(0, 4, 1, 1);
        assert!(!assembly.add_proposal(&net.keys, p));
        assert_eq!(assembly.rejected, 1);
    }
}
