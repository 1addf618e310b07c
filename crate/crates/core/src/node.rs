//! The per-node program tying dissemination, agreement and aggregation
//! together, plus the configured Byzantine behaviors.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::aggregation::{aggregate, fetch_candidates, missing, SignatureCollector};
use crate::agreement::{leader_of, Action, AgreementState, PrepareQc};
use crate::codec::document_digest;
use crate::crypto::{KeyStore, Signature};
use crate::dissemination::{
    Assembly, DigestVector, DisseminationState, DocReceipt, DocumentMessage, LeaderAssembly,
    Proposal, SlotProof,
};
use crate::netsim::scenario::{synth_document, Behavior, Scenario};
use crate::types::{AuthorityId, ConsensusDocument, Digest, StatusDocument};
use crate::wire::{Frame, Host, NodeNote, NodeProgram, Timer};

#[derive(Debug)]
struct FetchJob {
    digest: Digest,
    candidates: Vec<AuthorityId>,
    next: usize,
}

/// One directory authority running the partially synchronous protocol.
pub struct IcpsNode {
    me: AuthorityId,
    n: u16,
    f: u16,
    epoch: u64,
    keys: Arc<KeyStore>,
    behavior: Behavior,
    delta_us: u64,
    view_timer_us: u64,
    fetch_retry_us: u64,
    inclusion_threshold: usize,

    diss: DisseminationState,
    delta_elapsed: bool,
    gate_open: bool,
    proposal_sent: BTreeSet<u64>,
    assemblies: BTreeMap<u64, LeaderAssembly>,
    proposed: BTreeSet<u64>,
    grace_armed: BTreeSet<u64>,
    grace_done: BTreeSet<u64>,

    agree: AgreementState,

    decided: Option<(u64, DigestVector)>,
    fetched: BTreeMap<AuthorityId, Arc<StatusDocument>>,
    fetch_pending: BTreeMap<AuthorityId, FetchJob>,
    fetch_timer_armed: bool,
    collector: Option<SignatureCollector>,
    sig_buffer: Vec<(Digest, Signature)>,
    finalized_doc: Option<ConsensusDocument>,
    bad_fetch_responses: u64,

    /// Alternative own document, used by the equivocate and wrong_fetch
    /// behaviors.
    alt_doc: Option<Arc<StatusDocument>>,
}

impl IcpsNode {
    pub fn new(
        scenario: &Scenario,
        keys: Arc<KeyStore>,
        me: AuthorityId,
        own_doc: Arc<StatusDocument>,
    ) -> Self {
        let behavior = scenario.behavior(me);
        let alt_doc = matches!(behavior, Behavior::Equivocate | Behavior::WrongFetch)
            .then(|| Arc::new(synth_document(scenario, me, 1)));
        let (diss, _) = DisseminationState::start_epoch(
            &keys,
            me,
            scenario.n,
            scenario.f,
            scenario.epoch,
            own_doc,
        );
        IcpsNode {
            me,
            n: scenario.n,
            f: scenario.f,
            epoch: scenario.epoch,
            behavior,
            delta_us: crate::netsim::secs_to_us(scenario.delta_s),
            view_timer_us: crate::netsim::secs_to_us(scenario.view_timeout_s),
            fetch_retry_us: crate::netsim::secs_to_us(scenario.fetch_retry_s),
            inclusion_threshold: scenario.effective_quorum(),
            diss,
            delta_elapsed: false,
            gate_open: false,
            proposal_sent: BTreeSet::new(),
            assemblies: BTreeMap::new(),
            proposed: BTreeSet::new(),
            grace_armed: BTreeSet::new(),
            grace_done: BTreeSet::new(),
            agree: AgreementState::new(me, scenario.n, scenario.f, scenario.epoch),
            decided: None,
            fetched: BTreeMap::new(),
            fetch_pending: BTreeMap::new(),
            fetch_timer_armed: false,
            collector: None,
            sig_buffer: Vec::new(),
            finalized_doc: None,
            bad_fetch_responses: 0,
            keys,
            alt_doc,
        }
    }

    pub fn decided_vector(&self) -> Option<&DigestVector> {
        self.decided.as_ref().map(|(_, v)| v)
    }

    pub fn finalized_document(&self) -> Option<&ConsensusDocument> {
        self.finalized_doc.as_ref()
    }

    pub fn current_view(&self) -> u64 {
        self.agree.view
    }

    fn is_silent(&self) -> bool {
        self.behavior == Behavior::Silent
    }

    fn refresh_gate(&mut self, host: &mut dyn Host) {
        if !self.gate_open && self.diss.proposal_gate(self.delta_elapsed) {
            self.gate_open = true;
            host.note(NodeNote::GateOpen);
        }
        if self.gate_open {
            self.send_proposal_for(host, self.agree.view);
        }
    }

    fn send_proposal_for(&mut self, host: &mut dyn Host, view: u64) {
        if self.proposal_sent.contains(&view) {
            return;
        }
        let Some(proposal) = self.diss.build_proposal(&self.keys, view, self.delta_elapsed)
        else {
            return;
        };
        self.proposal_sent.insert(view);
        let leader = leader_of(view, self.n);
        if leader == self.me {
            self.leader_take_proposal(host, proposal);
        } else {
            host.send(leader, Frame::Proposal(proposal));
        }
    }

    fn leader_take_proposal(&mut self, host: &mut dyn Host, proposal: Proposal) {
        let view = proposal.view;
        // evidence travels with proposals; the leader also folds in what
        // it saw first-hand
        for ev in proposal.evidence.clone() {
            self.diss.add_evidence(&self.keys, ev);
        }
        let assembly = self
            .assemblies
            .entry(view)
            .or_insert_with(|| LeaderAssembly::new(view, self.n, self.f, self.epoch));
        for owner in AuthorityId::all(self.n) {
            if let Some(ev) = self.diss.equivocation(owner) {
                assembly.add_evidence(&self.keys, ev.clone());
            }
        }
        assembly.add_proposal(&self.keys, proposal);
        self.maybe_propose(host, view);
    }

    fn maybe_propose(&mut self, host: &mut dyn Host, view: u64) {
        if leader_of(view, self.n) != self.me
            || self.agree.view != view
            || self.proposed.contains(&view)
        {
            return;
        }
        if self.behavior == Behavior::BogusPropose {
            // an invalid vector: no proofs back the claimed entries
            let bogus = DigestVector {
                view,
                entries: vec![None; self.n as usize],
                proofs: vec![SlotProof::Exclusion { sigs: Vec::new() }; self.n as usize],
            };
            self.proposed.insert(view);
            host.broadcast(Frame::Agreement(self.agree.make_proposal(bogus, None)));
            return;
        }
        let justify: Option<(PrepareQc, DigestVector)> = if view == 0 {
            None
        } else {
            // a later-view leader waits for 2f+1 NewView messages plus a
            // grace of Δ so every correct lock can reach it, then must
            // re-propose the highest certified value if any exists
            if self.agree.new_view_count(view) < self.agree.quorum() {
                return;
            }
            if self.grace_armed.insert(view) {
                host.set_timer(Timer::NewViewGrace(view), self.delta_us);
            }
            if !self.grace_done.contains(&view) {
                return;
            }
            self.agree.highest_justify(view)
        };
        let (vector, qc) = match justify {
            Some((qc, vector)) => (vector, Some(qc)),
            None => {
                let ready = self
                    .assemblies
                    .get(&view)
                    .map(|a| a.try_assemble())
                    .unwrap_or(Assembly::NotReady);
                match ready {
                    Assembly::Ready(vector) => (vector, None),
                    Assembly::NotReady => return,
                }
            }
        };
        self.proposed.insert(view);
        let msg = self.agree.make_proposal(vector, qc);
        host.broadcast(Frame::Agreement(msg.clone()));
        // the leader processes its own proposal like everyone else
        let actions = self.agree.on_message(&self.keys, self.me, msg);
        self.apply_agreement_actions(host, actions);
    }

    fn apply_agreement_actions(&mut self, host: &mut dyn Host, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Broadcast(msg) => host.broadcast(Frame::Agreement(msg)),
                Action::Decide { view, vector } => self.on_decide(host, view, vector),
            }
        }
    }

    fn enter_view(&mut self, host: &mut dyn Host, view: u64) {
        let (new_view_msg, actions) = self.agree.enter_view(&self.keys, view);
        // timers double on each view change
        self.view_timer_us = self.view_timer_us.saturating_mul(2);
        host.set_timer(Timer::View(view), self.view_timer_us);
        host.note(NodeNote::ViewEntered(view));
        host.broadcast(Frame::Agreement(new_view_msg));
        if self.gate_open {
            self.send_proposal_for(host, view);
        }
        self.apply_agreement_actions(host, actions);
        self.maybe_propose(host, view);
    }

    fn run_catch_up(&mut self, host: &mut dyn Host) {
        while let Some(target) = self.agree.catch_up_view() {
            if target <= self.agree.view {
                break;
            }
            self.enter_view(host, target);
        }
    }

    fn on_decide(&mut self, host: &mut dyn Host, view: u64, vector: DigestVector) {
        if self.decided.is_some() {
            return;
        }
        host.note(NodeNote::Decided {
            view,
            value: vector.value(),
            entries: vector.entries.clone(),
        });
        self.decided = Some((view, vector.clone()));
        let missing = missing(&vector, |slot, digest| {
            self.diss.document(slot, digest).is_some()
        });
        for (slot, digest) in missing {
            let candidates = fetch_candidates(&vector, slot, self.n, self.me);
            let job = FetchJob { digest, candidates, next: 0 };
            if let Some(&to) = job.candidates.first() {
                host.send(to, Frame::FetchRequest { slot, digest });
            }
            self.fetch_pending.insert(slot, job);
        }
        if self.fetch_pending.is_empty() {
            self.aggregate_and_sign(host);
        } else if !self.fetch_timer_armed {
            self.fetch_timer_armed = true;
            host.set_timer(Timer::FetchRetry, self.fetch_retry_us);
        }
    }

    fn slot_document(&self, slot: AuthorityId, digest: &Digest) -> Option<Arc<StatusDocument>> {
        self.diss
            .document(slot, digest)
            .or_else(|| self.fetched.get(&slot).filter(|d| {
                document_digest(d).ok().as_ref() == Some(digest)
            }).cloned())
    }

    fn aggregate_and_sign(&mut self, host: &mut dyn Host) {
        if self.collector.is_some() {
            return;
        }
        let Some((_, vector)) = &self.decided else { return };
        let slots: Vec<Option<Arc<StatusDocument>>> = vector
            .entries
            .iter()
            .enumerate()
            .map(|(j, entry)| {
                entry.map(|digest| {
                    self.slot_document(AuthorityId(j as u16), &digest)
                        .expect("every non-⊥ slot is fetched before aggregation")
                })
            })
            .collect();
        let doc = aggregate(&slots, self.inclusion_threshold, self.epoch);
        let (collector, own_sig) = SignatureCollector::start(
            &self.keys,
            self.me,
            self.epoch,
            doc,
            (2 * self.f + 1) as usize,
        );
        host.broadcast(Frame::ConsensusSig { digest: collector.digest, sig: own_sig });
        self.collector = Some(collector);
        for (digest, sig) in std::mem::take(&mut self.sig_buffer) {
            self.collector.as_mut().unwrap().add(&self.keys, self.epoch, digest, sig);
        }
        self.finalize_if_complete(host);
    }

    fn finalize_if_complete(&mut self, host: &mut dyn Host) {
        if self.finalized_doc.is_some() {
            return;
        }
        let Some(collector) = &self.collector else { return };
        if let Some(doc) = collector.finalize() {
            host.note(NodeNote::Finalized {
                digest: collector.digest,
                signatures: doc.signatures.len(),
            });
            self.finalized_doc = Some(doc);
        }
    }

    fn fill_fetch(&mut self, host: &mut dyn Host, slot: AuthorityId, doc: Arc<StatusDocument>) {
        self.fetched.insert(slot, doc);
        self.fetch_pending.remove(&slot);
        if self.fetch_pending.is_empty() && self.decided.is_some() {
            self.aggregate_and_sign(host);
        }
    }

    fn on_document_frame(&mut self, host: &mut dyn Host, msg: DocumentMessage) {
        let slot = msg.doc.author;
        let digest = msg.digest;
        let doc = msg.doc.clone();
        match self.diss.on_document(&self.keys, msg) {
            DocReceipt::Stored | DocReceipt::Equivocation => {
                self.refresh_gate(host);
                // a late broadcast can satisfy an outstanding fetch
                if self.fetch_pending.get(&slot).map(|j| j.digest) == Some(digest) {
                    self.fill_fetch(host, slot, doc);
                }
            }
            DocReceipt::Duplicate | DocReceipt::Invalid => {}
        }
    }

    fn on_fetch_request(&mut self, host: &mut dyn Host, from: AuthorityId, slot: AuthorityId, digest: Digest) {
        if self.behavior == Behavior::WrongFetch {
            let wrong = self.alt_doc.clone().expect("wrong_fetch keeps an alternative document");
            host.send(from, Frame::FetchResponse { slot, doc: Some(wrong) });
            return;
        }
        let doc = self
            .diss
            .document(slot, &digest)
            .or_else(|| self.fetched.get(&slot).cloned().filter(|d| {
                document_digest(d).ok() == Some(digest)
            }));
        host.send(from, Frame::FetchResponse { slot, doc });
    }

    fn on_fetch_response(
        &mut self,
        host: &mut dyn Host,
        slot: AuthorityId,
        doc: Option<Arc<StatusDocument>>,
    ) {
        let Some(job) = self.fetch_pending.get_mut(&slot) else { return };
        if let Some(doc) = doc {
            // a responder is correct only if the digest matches
            if document_digest(&doc).ok() == Some(job.digest) {
                self.fill_fetch(host, slot, doc);
                return;
            }
            self.bad_fetch_responses += 1;
        }
        // wrong bytes or not found: move to the next candidate now
        job.next = (job.next + 1) % job.candidates.len().max(1);
        let digest = job.digest;
        if let Some(&to) = job.candidates.get(job.next) {
            host.send(to, Frame::FetchRequest { slot, digest });
        }
    }

    fn on_consensus_sig(&mut self, host: &mut dyn Host, digest: Digest, sig: Signature) {
        match &mut self.collector {
            Some(collector) => {
                collector.add(&self.keys, self.epoch, digest, sig);
                self.finalize_if_complete(host);
            }
            None => self.sig_buffer.push((digest, sig)),
        }
    }
}

impl NodeProgram for IcpsNode {
    fn on_init(&mut self, host: &mut dyn Host) {
        if self.is_silent() {
            return;
        }
        let own = self
            .diss
            .any_document(self.me)
            .expect("own document present")
            .clone();
        match self.behavior {
            Behavior::Equivocate => {
                // one story for the lower half of the cluster, another for
                // the upper half
                let alt = self.alt_doc.clone().expect("equivocator keeps a second document");
                let alt_msg = DocumentMessage::build(&self.keys, self.epoch, alt);
                for peer in AuthorityId::all(self.n) {
                    if peer == self.me {
                        continue;
                    }
                    let msg = if peer.0 < self.n / 2 { own.clone() } else { alt_msg.clone() };
                    host.send(peer, Frame::Document(msg));
                }
            }
            _ => host.broadcast(Frame::Document(own)),
        }
        host.set_timer(Timer::DocWait, self.delta_us);
        host.set_timer(Timer::View(0), self.view_timer_us);
        host.note(NodeNote::ViewEntered(0));
        self.refresh_gate(host);
    }

    fn on_frame(&mut self, host: &mut dyn Host, from: AuthorityId, frame: Frame) {
        if self.is_silent() {
            return;
        }
        match frame {
            Frame::Document(msg) => self.on_document_frame(host, msg),
            Frame::Proposal(proposal) => {
                if leader_of(proposal.view, self.n) == self.me && proposal.proposer == from {
                    self.leader_take_proposal(host, proposal);
                }
            }
            Frame::Agreement(msg) => {
                let view = msg.view();
                let actions = self.agree.on_message(&self.keys, from, msg);
                self.apply_agreement_actions(host, actions);
                self.run_catch_up(host);
                self.maybe_propose(host, view.max(self.agree.view));
            }
            Frame::FetchRequest { slot, digest } => {
                self.on_fetch_request(host, from, slot, digest)
            }
            Frame::FetchResponse { slot, doc } => self.on_fetch_response(host, slot, doc),
            Frame::ConsensusSig { digest, sig } => self.on_consensus_sig(host, digest, sig),
            // legacy frames are not ours to handle
            Frame::LegacyVote(_)
            | Frame::LegacyVoteRequest { .. }
            | Frame::LegacySig { .. }
            | Frame::LegacySigRequest => {}
        }
    }

    fn on_timer(&mut self, host: &mut dyn Host, timer: Timer) {
        if self.is_silent() {
            return;
        }
        match timer {
            Timer::DocWait => {
                self.delta_elapsed = true;
                self.refresh_gate(host);
            }
            Timer::View(view) => {
                if view == self.agree.view {
                    self.enter_view(host, view + 1);
                }
            }
            Timer::NewViewGrace(view) => {
                self.grace_done.insert(view);
                self.maybe_propose(host, view);
            }
            Timer::FetchRetry => {
                if self.fetch_pending.is_empty() {
                    self.fetch_timer_armed = false;
                    return;
                }
                let slots: Vec<AuthorityId> = self.fetch_pending.keys().copied().collect();
                for slot in slots {
                    let job = self.fetch_pending.get_mut(&slot).unwrap();
                    job.next = (job.next + 1) % job.candidates.len().max(1);
                    let digest = job.digest;
                    if let Some(&to) = job.candidates.get(job.next) {
                        host.send(to, Frame::FetchRequest { slot, digest });
                    }
                }
                host.set_timer(Timer::FetchRetry, self.fetch_retry_us);
            }
            Timer::LegacyRound(_) => {}
        }
    }

    fn finalized(&self) -> Option<Digest> {
        self.collector.as_ref().filter(|_| self.finalized_doc.is_some()).map(|c| c.digest)
    }

    fn done(&self) -> bool {
        self.finalized_doc.is_some()
    }

    fn invalid_dropped(&self) -> u64 {
        self.diss.dropped_invalid
            + self.agree.dropped_invalid
            + self.bad_fetch_responses
            + self.assemblies.values().map(|a| a.rejected).sum::<u64>()
            + self.collector.as_ref().map_or(0, |c| c.rejected)
    }

    fn divergence(&self) -> u64 {
        self.collector.as_ref().map_or(0, |c| c.divergence)
    }
}
