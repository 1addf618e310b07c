//! Single-shot view-based Byzantine agreement over a digest vector, with
//! external validity supplied by the vector's proofs.
//!
//! One decision per epoch, so a two-phase-vote engine with explicit
//! prepare-certificate locking is used: Propose, then all-to-all
//! PrepareVote, then all-to-all CommitVote. Every node assembles the
//! prepare certificate from the votes it collects, locks on it, and
//! decides on 2f+1 commit votes. View changes carry the highest known
//! certificate (with its vector) to the next leader, which must re-propose
//! it if any exists.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{Context, KeyStore, Signature};
use crate::dissemination::{verify_vector, DigestVector};
use crate::types::{AuthorityId, Digest};

/// Round-robin leader rotation.
pub fn leader_of(view: u64, n: u16) -> AuthorityId {
    AuthorityId((view % n as u64) as u16)
}

fn vote_payload(phase: u8, view: u64, value: &Digest) -> Vec<u8> {
    let mut p = Vec::with_capacity(1 + 8 + 32);
    p.push(phase);
    p.extend_from_slice(&view.to_be_bytes());
    p.extend_from_slice(&value.0);
    p
}

const PHASE_PREPARE: u8 = 1;
const PHASE_COMMIT: u8 = 2;

/// 2f+1 distinct prepare signatures on one `(view, value)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PrepareQc {
    pub view: u64,
    pub value: Digest,
    pub sigs: Vec<Signature>,
}

impl PrepareQc {
    pub fn validate(&self, keys: &KeyStore, epoch: u64, f: u16) -> bool {
        if self.sigs.len() != (2 * f + 1) as usize {
            return false;
        }
        let mut seen = BTreeSet::new();
        let payload = vote_payload(PHASE_PREPARE, self.view, &self.value);
        self.sigs.iter().all(|s| {
            seen.insert(s.signer) && keys.verify(Context::AgreeVote, epoch, &payload, s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AgreementMsg {
    Propose {
        view: u64,
        vector: DigestVector,
        /// Certificate justifying this value to nodes locked in earlier
        /// views; required to certify the proposed value itself.
        justify: Option<PrepareQc>,
    },
    PrepareVote {
        view: u64,
        value: Digest,
        sig: Signature,
    },
    CommitVote {
        view: u64,
        value: Digest,
        sig: Signature,
    },
    NewView {
        view: u64,
        /// Highest prepare certificate this node holds, with the vector it
        /// certifies so the next leader can re-propose it.
        justify: Option<(PrepareQc, DigestVector)>,
        sig: Signature,
    },
}

impl AgreementMsg {
    pub fn view(&self) -> u64 {
        match self {
            AgreementMsg::Propose { view, .. }
            | AgreementMsg::PrepareVote { view, .. }
            | AgreementMsg::CommitVote { view, .. }
            | AgreementMsg::NewView { view, .. } => *view,
        }
    }
}

/// Validate a Propose: correct leader for the view, externally valid
/// vector, and a justify certificate that verifies, certifies this very
/// value, and predates the view.
pub fn validate_proposal(
    keys: &KeyStore,
    epoch: u64,
    from: AuthorityId,
    msg: &AgreementMsg,
    n: u16,
    f: u16,
) -> bool {
    let AgreementMsg::Propose { view, vector, justify } = msg else {
        return false;
    };
    if from != leader_of(*view, n) || !verify_vector(keys, epoch, vector, n, f) {
        return false;
    }
    match justify {
        None => true,
        Some(qc) => qc.value == vector.value() && qc.view < *view && qc.validate(keys, epoch, f),
    }
}

/// The highest certified value a node has seen; constrains later votes.
#[derive(Debug, Clone)]
pub struct Lock {
    pub qc: PrepareQc,
    pub vector: DigestVector,
}

/// Outputs of one step of the engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Broadcast(AgreementMsg),
    Decide { view: u64, vector: DigestVector },
}

/// Per-node agreement state. Events must be delivered serially.
#[derive(Debug)]
pub struct AgreementState {
    pub me: AuthorityId,
    pub n: u16,
    pub f: u16,
    pub epoch: u64,
    pub view: u64,
    pub lock: Option<Lock>,
    pub decided: Option<DigestVector>,
    /// Accepted (validated) proposal per view.
    proposals: BTreeMap<u64, DigestVector>,
    /// Propose messages seen for views not yet entered.
    pending_proposals: BTreeMap<u64, (AuthorityId, AgreementMsg)>,
    prepare_votes: BTreeMap<u64, BTreeMap<AuthorityId, (Digest, Signature)>>,
    commit_votes: BTreeMap<u64, BTreeMap<AuthorityId, (Digest, Signature)>>,
    new_views: BTreeMap<u64, BTreeMap<AuthorityId, Option<(PrepareQc, DigestVector)>>>,
    prepare_sent: BTreeSet<u64>,
    commit_sent: BTreeSet<u64>,
    pub dropped_invalid: u64,
    pub dropped_stale: u64,
}

impl AgreementState {
    pub fn new(me: AuthorityId, n: u16, f: u16, epoch: u64) -> Self {
        AgreementState {
            me,
            n,
            f,
            epoch,
            view: 0,
            lock: None,
            decided: None,
            proposals: BTreeMap::new(),
            pending_proposals: BTreeMap::new(),
            prepare_votes: BTreeMap::new(),
            commit_votes: BTreeMap::new(),
            new_views: BTreeMap::new(),
            prepare_sent: BTreeSet::new(),
            commit_sent: BTreeSet::new(),
            dropped_invalid: 0,
            dropped_stale: 0,
        }
    }

    pub fn quorum(&self) -> usize {
        (2 * self.f + 1) as usize
    }

    fn adopt_lock(&mut self, qc: PrepareQc, vector: DigestVector) {
        // lock.view is monotonically non-decreasing
        if self.lock.as_ref().map_or(true, |l| qc.view > l.qc.view) {
            self.lock = Some(Lock { qc, vector });
        }
    }

    /// The leader proposes `vector` in its current view, carrying its lock
    /// certificate when re-proposing a certified value.
    pub fn make_proposal(&self, vector: DigestVector, justify: Option<PrepareQc>) -> AgreementMsg {
        AgreementMsg::Propose { view: self.view, vector, justify }
    }

    /// Handle one message; returns protocol actions. Stale-view messages
    /// are dropped, future-view proposals are buffered until the view is
    /// entered.
    pub fn on_message(
        &mut self,
        keys: &KeyStore,
        from: AuthorityId,
        msg: AgreementMsg,
    ) -> Vec<Action> {
        let view = msg.view();
        match &msg {
            AgreementMsg::Propose { .. } => {
                if view < self.view {
                    self.dropped_stale += 1;
                    return Vec::new();
                }
                if view > self.view {
                    self.pending_proposals.entry(view).or_insert((from, msg));
                    return Vec::new();
                }
                self.handle_proposal(keys, from, msg)
            }
            // votes stay tallied even for passed views: a commit quorum is
            // decisive whenever it completes, and a prepare quorum still
            // yields a certificate worth locking
            AgreementMsg::PrepareVote { .. } | AgreementMsg::CommitVote { .. } => {
                self.handle_vote(keys, from, msg)
            }
            AgreementMsg::NewView { .. } => {
                if view < self.view {
                    self.dropped_stale += 1;
                    return Vec::new();
                }
                self.handle_new_view(keys, from, msg)
            }
        }
    }

    fn handle_proposal(
        &mut self,
        keys: &KeyStore,
        from: AuthorityId,
        msg: AgreementMsg,
    ) -> Vec<Action> {
        if !validate_proposal(keys, self.epoch, from, &msg, self.n, self.f) {
            self.dropped_invalid += 1;
            return Vec::new();
        }
        let AgreementMsg::Propose { view, vector, justify } = msg else {
            unreachable!();
        };
        let value = vector.value();
        // voting rule: empty lock, same value, or a justify from a view at
        // least as high as the lock
        let lock_ok = match &self.lock {
            None => true,
            Some(l) => {
                l.qc.value == value || justify.as_ref().map_or(false, |qc| qc.view >= l.qc.view)
            }
        };
        if let Some(qc) = justify {
            self.adopt_lock(qc, vector.clone());
        }
        self.proposals.entry(view).or_insert_with(|| vector.clone());

        let mut actions = Vec::new();
        if lock_ok && self.prepare_sent.insert(view) {
            let sig = keys.sign(
                self.me,
                Context::AgreeVote,
                self.epoch,
                &vote_payload(PHASE_PREPARE, view, &value),
            );
            let vote = AgreementMsg::PrepareVote { view, value, sig: sig.clone() };
            self.record_prepare(view, self.me, value, sig);
            actions.push(Action::Broadcast(vote));
        }
        actions.extend(self.check_tallies(keys));
        actions
    }

    fn record_prepare(&mut self, view: u64, voter: AuthorityId, value: Digest, sig: Signature) {
        self.prepare_votes.entry(view).or_default().entry(voter).or_insert((value, sig));
    }

    fn record_commit(&mut self, view: u64, voter: AuthorityId, value: Digest, sig: Signature) {
        self.commit_votes.entry(view).or_default().entry(voter).or_insert((value, sig));
    }

    fn handle_vote(
        &mut self,
        keys: &KeyStore,
        from: AuthorityId,
        msg: AgreementMsg,
    ) -> Vec<Action> {
        let (phase, view, value, sig) = match msg {
            AgreementMsg::PrepareVote { view, value, sig } => (PHASE_PREPARE, view, value, sig),
            AgreementMsg::CommitVote { view, value, sig } => (PHASE_COMMIT, view, value, sig),
            _ => unreachable!(),
        };
        if sig.signer != from
            || !keys.verify(Context::AgreeVote, self.epoch, &vote_payload(phase, view, &value), &sig)
        {
            self.dropped_invalid += 1;
            return Vec::new();
        }
        // duplicate votes per (view, voter) are ignored
        if phase == PHASE_PREPARE {
            self.record_prepare(view, from, value, sig);
        } else {
            self.record_commit(view, from, value, sig);
        }
        self.check_tallies(keys)
    }

    fn handle_new_view(
        &mut self,
        keys: &KeyStore,
        from: AuthorityId,
        msg: AgreementMsg,
    ) -> Vec<Action> {
        let AgreementMsg::NewView { view, justify, sig } = msg else {
            unreachable!();
        };
        if sig.signer != from
            || !keys.verify(Context::NewView, self.epoch, &view.to_be_bytes(), &sig)
        {
            self.dropped_invalid += 1;
            return Vec::new();
        }
        if let Some((qc, vector)) = &justify {
            if qc.value != vector.value()
                || !qc.validate(keys, self.epoch, self.f)
                || !verify_vector(keys, self.epoch, vector, self.n, self.f)
            {
                self.dropped_invalid += 1;
                return Vec::new();
            }
            self.adopt_lock(qc.clone(), vector.clone());
        }
        self.new_views.entry(view).or_default().entry(from).or_insert(justify);
        self.check_tallies(keys)
    }

    /// Form certificates and decisions from completed tallies, in any
    /// view whose proposal vector is known.
    fn check_tallies(&mut self, keys: &KeyStore) -> Vec<Action> {
        let mut actions = Vec::new();
        let prepare_views: Vec<u64> = self.prepare_votes.keys().copied().collect();
        for view in prepare_views {
            if self.commit_sent.contains(&view) {
                continue;
            }
            let Some((value, qc_sigs)) = self.tally(&self.prepare_votes, view) else {
                continue;
            };
            let Some(vector) = self.proposals.get(&view).filter(|v| v.value() == value).cloned()
            else {
                continue;
            };
            let qc = PrepareQc { view, value, sigs: qc_sigs };
            self.adopt_lock(qc, vector);
            self.commit_sent.insert(view);
            let sig = keys.sign(
                self.me,
                Context::AgreeVote,
                self.epoch,
                &vote_payload(PHASE_COMMIT, view, &value),
            );
            let vote = AgreementMsg::CommitVote { view, value, sig: sig.clone() };
            self.record_commit(view, self.me, value, sig);
            actions.push(Action::Broadcast(vote));
        }
        if self.decided.is_none() {
            let commit_views: Vec<u64> = self.commit_votes.keys().copied().collect();
            for view in commit_views {
                let Some((value, _)) = self.tally(&self.commit_votes, view) else {
                    continue;
                };
                let Some(vector) =
                    self.proposals.get(&view).filter(|v| v.value() == value).cloned()
                else {
                    continue;
                };
                self.decided = Some(vector.clone());
                actions.push(Action::Decide { view, vector });
                break;
            }
        }
        actions
    }

    /// 2f+1 matching votes in `view`, if any; returns the value and the
    /// first 2f+1 signatures in voter order.
    fn tally(
        &self,
        votes: &BTreeMap<u64, BTreeMap<AuthorityId, (Digest, Signature)>>,
        view: u64,
    ) -> Option<(Digest, Vec<Signature>)> {
        let per_voter = votes.get(&view)?;
        let mut by_value: BTreeMap<Digest, Vec<Signature>> = BTreeMap::new();
        for (value, sig) in per_voter.values() {
            by_value.entry(*value).or_default().push(sig.clone());
        }
        by_value
            .into_iter()
            .find(|(_, sigs)| sigs.len() >= self.quorum())
            .map(|(value, sigs)| (value, sigs.into_iter().take(self.quorum()).collect()))
    }

    /// Move to `view` (timeout or catch-up). Returns the NewView to
    /// broadcast plus any actions unlocked by buffered messages.
    pub fn enter_view(&mut self, keys: &KeyStore, view: u64) -> (AgreementMsg, Vec<Action>) {
        assert!(view > self.view, "views only move forward");
        self.view = view;
        let sig = keys.sign(self.me, Context::NewView, self.epoch, &view.to_be_bytes());
        let justify = self.lock.as_ref().map(|l| (l.qc.clone(), l.vector.clone()));
        let msg = AgreementMsg::NewView { view, justify: justify.clone(), sig: sig.clone() };
        self.new_views.entry(view).or_default().entry(self.me).or_insert(justify);
        let mut actions = Vec::new();
        if let Some((from, pending)) = self.pending_proposals.remove(&view) {
            actions.extend(self.handle_proposal(keys, from, pending));
        }
        actions.extend(self.check_tallies(keys));
        (msg, actions)
    }

    /// Highest view `v > current` claimed by at least f+1 distinct nodes'
    /// NewView messages; trigger for joining a view change.
    pub fn catch_up_view(&self) -> Option<u64> {
        let mut claims: Vec<u64> = Vec::new();
        for (view, senders) in self.new_views.range(self.view + 1..) {
            for _ in senders.keys() {
                claims.push(*view);
            }
        }
        claims.sort_unstable_by(|a, b| b.cmp(a));
        let idx = (self.f as usize).min(claims.len().saturating_sub(1));
        if claims.len() >= (self.f + 1) as usize {
            Some(claims[idx])
        } else {
            None
        }
    }

    pub fn new_view_count(&self, view: u64) -> usize {
        self.new_views.get(&view).map_or(0, |m| m.len())
    }

    /// Highest certified value among NewView messages for `view` (and our
    /// own lock), which the leader must re-propose if any exists.
    pub fn highest_justify(&self, view: u64) -> Option<(PrepareQc, DigestVector)> {
        let mut best: Option<(PrepareQc, DigestVector)> = None;
        let from_lock = self.lock.as_ref().map(|l| (l.qc.clone(), l.vector.clone()));
        let from_msgs = self
            .new_views
            .get(&view)
            .into_iter()
            .flat_map(|m| m.values().flatten().cloned());
        for (qc, vector) in from_msgs.chain(from_lock) {
            if best.as_ref().map_or(true, |(b, _)| qc.view > b.view) {
                best = Some((qc, vector));
            }
        }
        best
    }

    pub fn has_proposed_value(&self, view: u64) -> bool {
        self.proposals.contains_key(&view)
    }
}
