//! Document recovery and local aggregation: fetch what the decided vector
//! names, merge relay entries by majority rules, then collect consensus
//! signatures from 2f+1 distinct authorities over identical bytes.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::codec::{consensus_encode, document_digest, hash};
use crate::crypto::{Context, KeyStore, Signature};
use crate::dissemination::DigestVector;
use crate::types::{AuthorityId, ConsensusDocument, Digest, RelayDescriptor, StatusDocument};

/// Strict-majority inclusion threshold over `n` configured authorities.
pub fn default_threshold(n: u16) -> usize {
    (n as usize) / 2 + 1
}

/// The non-⊥ slots of a decided vector whose documents are not in the
/// local store. ⊥ slots never appear.
pub fn missing(
    decided: &DigestVector,
    have: impl Fn(AuthorityId, &Digest) -> bool,
) -> Vec<(AuthorityId, Digest)> {
    decided
        .entries
        .iter()
        .enumerate()
        .filter_map(|(j, entry)| {
            let digest = entry.as_ref()?;
            let owner = AuthorityId(j as u16);
            (!have(owner, digest)).then_some((owner, *digest))
        })
        .collect()
}

/// Merge slot documents into the unsigned consensus document.
///
/// A relay is included iff it appears in at least `t` slots; its nickname
/// comes from the including vote with the largest authority id; a flag is
/// set iff strictly more including votes set it than not; version,
/// protocol and exit policy take the maximum; bandwidth is the lower
/// median of the measured votes, absent when none measure it. Output is
/// sorted by fingerprint and is a pure function of the input slots.
pub fn aggregate(
    slots: &[Option<Arc<StatusDocument>>],
    t: usize,
    epoch: u64,
) -> ConsensusDocument {
    let mut votes: BTreeMap<&crate::types::Fingerprint, Vec<(AuthorityId, &RelayDescriptor)>> =
        BTreeMap::new();
    for slot in slots.iter().flatten() {
        for relay in &slot.relays {
            votes.entry(&relay.fingerprint).or_default().push((slot.author, relay));
        }
    }
    let mut relays = Vec::new();
    for (fingerprint, votes) in votes {
        if votes.len() < t {
            continue;
        }
        let nickname = votes
            .iter()
            .max_by_key(|(author, _)| *author)
            .map(|(_, r)| r.nickname.clone())
            .unwrap();
        let mut flag_names = std::collections::BTreeSet::new();
        for (_, r) in &votes {
            flag_names.extend(r.flags.iter().cloned());
        }
        let flags = flag_names
            .into_iter()
            .filter(|name| {
                let set = votes.iter().filter(|(_, r)| r.flags.contains(name)).count();
                // not set in case of a tie
                2 * set > votes.len()
            })
            .collect();
        let version = votes.iter().map(|(_, r)| r.version.clone()).max().unwrap();
        let protocols = votes.iter().map(|(_, r)| r.protocols.clone()).max().unwrap();
        let exit_policy_summary =
            votes.iter().map(|(_, r)| r.exit_policy_summary.clone()).max().unwrap();
        let mut measured_bw: Vec<u64> = votes
            .iter()
            .filter(|(_, r)| r.measured)
            .filter_map(|(_, r)| r.bandwidth)
            .collect();
        measured_bw.sort_unstable();
        let bandwidth = if measured_bw.is_empty() {
            None
        } else {
            Some(measured_bw[(measured_bw.len() - 1) / 2])
        };
        relays.push(RelayDescriptor {
            fingerprint: fingerprint.clone(),
            nickname,
            flags,
            version,
            protocols,
            exit_policy_summary,
            bandwidth,
            measured: bandwidth.is_some(),
        });
    }
    ConsensusDocument { epoch, relays, signatures: Vec::new() }
}

/// Collects consensus signatures over one's own aggregate bytes;
/// signatures over different bytes are divergence evidence, never counted.
#[derive(Debug)]
pub struct SignatureCollector {
    pub doc: ConsensusDocument,
    encoding: Vec<u8>,
    pub digest: Digest,
    threshold: usize,
    sigs: BTreeMap<AuthorityId, Signature>,
    pub divergence: u64,
    pub rejected: u64,
}

impl SignatureCollector {
    /// Sign one's own aggregate and start collecting; returns the
    /// collector and the signature to broadcast.
    pub fn start(
        keys: &KeyStore,
        me: AuthorityId,
        epoch: u64,
        doc: ConsensusDocument,
        threshold: usize,
    ) -> (Self, Signature) {
        let encoding = consensus_encode(&doc).expect("own aggregate must be canonical");
        let digest = hash(&encoding);
        let own = keys.sign(me, Context::Consensus, epoch, &encoding);
        let mut sigs = BTreeMap::new();
        sigs.insert(me, own.clone());
        (
            SignatureCollector {
                doc,
                encoding,
                digest,
                threshold,
                sigs,
                divergence: 0,
                rejected: 0,
            },
            own,
        )
    }

    /// Record a peer's signature. `claimed_digest` is what the peer signed
    /// over; a mismatch with our own bytes is recorded as divergence.
    pub fn add(
        &mut self,
        keys: &KeyStore,
        epoch: u64,
        claimed_digest: Digest,
        sig: Signature,
    ) -> bool {
        if claimed_digest != self.digest {
            self.divergence += 1;
            return false;
        }
        if !keys.verify(Context::Consensus, epoch, &self.encoding, &sig) {
            self.rejected += 1;
            return false;
        }
        self.sigs.entry(sig.signer).or_insert(sig);
        self.complete()
    }

    pub fn complete(&self) -> bool {
        self.sigs.len() >= self.threshold
    }

    pub fn signature_count(&self) -> usize {
        self.sigs.len()
    }

    /// The finalized document with its signature set, once complete.
    pub fn finalize(&self) -> Option<ConsensusDocument> {
        self.complete().then(|| {
            let mut doc = self.doc.clone();
            doc.signatures = self.sigs.values().cloned().collect();
            doc
        })
    }
}

/// Candidate responders for a missing slot: the inclusion proof signers
/// first (at least one of them is correct and holds the document), then
/// every other peer.
pub fn fetch_candidates(
    decided: &DigestVector,
    slot: AuthorityId,
    n: u16,
    me: AuthorityId,
) -> Vec<AuthorityId> {
    let mut order: Vec<AuthorityId> = decided.inclusion_signers(slot.index());
    for peer in AuthorityId::all(n) {
        if !order.contains(&peer) {
            order.push(peer);
        }
    }
    order.retain(|p| *p != me);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SchemeKind;
    use crate::types::Fingerprint;
    use std::collections::BTreeSet;

    fn relay(fp: u8, author: u16) -> RelayDescriptor {
        RelayDescriptor {
            fingerprint: Fingerprint(vec![fp]),
            nickname: format!("nick{author}"),
            flags: BTreeSet::new(),
            version: "0.4.8".into(),
            protocols: "Link=1-4".into(),
            exit_policy_summary: "reject 1-65535".into(),
            bandwidth: None,
            measured: false,
        }
    }

    fn doc_of(author: u16, relays: Vec<RelayDescriptor>) -> Arc<StatusDocument> {
        Arc::new(StatusDocument::new(AuthorityId(author), 1, relays).unwrap())
    }

    #[test]
    fn inclusion_threshold_five_of_nine() {
        // relay 1 in 5 slots → included; relay 2 in 4 slots → excluded
        let mut slots: Vec<Option<Arc<StatusDocument>>> = Vec::new();
        for author in 0..9u16 {
            let mut relays = Vec::new();
            if author < 5 {
                relays.push(relay(1, author));
            }
            if author >= 5 {
                relays.push(relay(2, author));
            }
            slots.push(Some(doc_of(author, relays)));
        }
        let out = aggregate(&slots, default_threshold(9), 1);
        assert_eq!(default_threshold(9), 5);
        assert_eq!(out.relays.len(), 1);
        assert_eq!(out.relays[0].fingerprint, Fingerprint(vec![1]));
    }

    #[test]
    fn nickname_from_largest_authority_id() {
        let mut slots: Vec<Option<Arc<StatusDocument>>> = vec![None; 9];
        for author in [3u16, 7, 1, 2, 4] {
            let mut r = relay(1, author);
            r.nickname = if author == 3 { "alpha".into() } else if author == 7 { "beta".into() } else { format!("n{author}") };
            slots[author as usize] = Some(doc_of(author, vec![r]));
        }
        let out = aggregate(&slots, 5, 1);
        assert_eq!(out.relays[0].nickname, "beta");
    }

    #[test]
    fn flag_tie_is_unset() {
        // Fast set by 3 of 6 including votes → tie → unset; 4 of 6 → set
        for (set_count, expect) in [(3usize, false), (4, true)] {
            let mut slots: Vec<Option<Arc<StatusDocument>>> = Vec::new();
            for author in 0..6u16 {
                let mut r = relay(1, author);
                if (author as usize) < set_count {
                    r.flags.insert("Fast".into());
                }
                slots.push(Some(doc_of(author, vec![r])));
            }
            let out = aggregate(&slots, 4, 1);
            assert_eq!(out.relays[0].flags.contains("Fast"), expect, "{set_count} of 6");
        }
    }

    #[test]
    fn bandwidth_is_lower_median_of_measured_votes() {
        let cases: [(&[Option<u64>], Option<u64>); 4] = [
            (&[Some(100), Some(200), Some(250)], Some(200)),
            (&[Some(100), Some(200)], Some(100)),
            (&[None, None, None], None),
            (&[Some(500), None, Some(100), Some(300), Some(200)], Some(200)),
        ];
        for (bws, expected) in cases {
            let mut slots: Vec<Option<Arc<StatusDocument>>> = Vec::new();
            for (author, bw) in bws.iter().enumerate() {
                let mut r = relay(1, author as u16);
                r.bandwidth = *bw;
                r.measured = bw.is_some();
                slots.push(Some(doc_of(author as u16, vec![r])));
            }
            let out = aggregate(&slots, 1, 1);
            assert_eq!(out.relays[0].bandwidth, expected, "case {bws:?}");
            assert_eq!(out.relays[0].measured, expected.is_some());
        }
    }

    #[test]
    fn version_protocol_policy_take_maximum() {
        let mut slots: Vec<Option<Arc<StatusDocument>>> = Vec::new();
        for (author, v, p, e) in [
            (0u16, "0.4.7", "Link=1-4", "accept 80"),
            (1, "0.4.9", "Link=1-5", "accept 80,443"),
            (2, "0.4.8", "Link=1-3", "accept 22"),
        ] {
            let mut r = relay(1, author);
            r.version = v.into();
            r.protocols = p.into();
            r.exit_policy_summary = e.into();
            slots.push(Some(doc_of(author, vec![r])));
        }
        let out = aggregate(&slots, 2, 1);
        assert_eq!(out.relays[0].version, "0.4.9");
        assert_eq!(out.relays[0].protocols, "Link=1-5");
        assert_eq!(out.relays[0].exit_policy_summary, "accept 80,443");
    }

    #[test]
    fn bottom_slots_contribute_nothing_and_output_is_sorted() {
        let slots: Vec<Option<Arc<StatusDocument>>> = vec![
            Some(doc_of(0, vec![relay(2, 0), relay(1, 0)])),
            None,
            Some(doc_of(2, vec![relay(1, 2), relay(2, 2)])),
        ];
        let out = aggregate(&slots, 2, 1);
        assert_eq!(out.relays.len(), 2);
        assert!(out.relays[0].fingerprint < out.relays[1].fingerprint);
    }

    #[test]
    fn missing_is_exact_set_difference() {
        let keys = KeyStore::generate(4, SchemeKind::Mac, 5);
        let _ = &keys;
        let digests: Vec<Digest> = (0..9u8).map(|i| hash(&[i])).collect();
        let decided = DigestVector {
            view: 0,
            entries: (0..9)
                .map(|j| if j == 3 || j == 6 { None } else { Some(digests[j]) })
                .collect(),
            proofs: (0..9).map(|_| crate::dissemination::SlotProof::Inclusion { sigs: vec![] }).collect(),
        };
        // store holds 5 of the 7 non-⊥ documents
        let held: BTreeSet<usize> = [0, 1, 2, 4, 5].into();
        let got = missing(&decided, |slot, d| held.contains(&slot.index()) && *d == digests[slot.index()]);
        assert_eq!(
            got,
            vec![(AuthorityId(7), digests[7]), (AuthorityId(8), digests[8])]
        );
        // everything held → empty
        let none = missing(&decided, |_, _| true);
        assert!(none.is_empty());
    }

    #[test]
    fn signature_collection_and_divergence() {
        let keys = KeyStore::generate(9, SchemeKind::Mac, 5);
        let slots: Vec<Option<Arc<StatusDocument>>> =
            (0..9u16).map(|a| Some(doc_of(a, vec![relay(1, a)]))).collect();
        let doc = aggregate(&slots, 5, 1);
        let (mut collector, _own) =
            SignatureCollector::start(&keys, AuthorityId(0), 1, doc.clone(), 7);
        let encoding = consensus_encode(&doc).unwrap();
        let digest = hash(&encoding);
        for peer in 1..7u16 {
            let sig = keys.sign(AuthorityId(peer), Context::Consensus, 1, &encoding);
            collector.add(&keys, 1, digest, sig);
        }
        assert!(collector.complete());
        let finalized = collector.finalize().unwrap();
        assert_eq!(finalized.signatures.len(), 7);

        // signature over different bytes → divergence, not counted
        let other = ConsensusDocument { epoch: 1, relays: vec![], signatures: vec![] };
        let other_enc = consensus_encode(&other).unwrap();
        let sig = keys.sign(AuthorityId(8), Context::Consensus, 1, &other_enc);
        let counted = collector.add(&keys, 1, hash(&other_enc), sig);
        assert!(counted); // already complete from before
        assert_eq!(collector.divergence, 1);
        assert_eq!(collector.signature_count(), 7);
    }

    #[test]
    fn fetch_candidates_prefer_inclusion_signers() {
        let keys = KeyStore::generate(5, SchemeKind::Mac, 5);
        let sig = |i: u16| keys.sign(AuthorityId(i), Context::ProposalSlot, 1, b"x");
        let decided = DigestVector {
            view: 0,
            entries: vec![Some(hash(b"d")), None, None, None, None],
            proofs: vec![
                crate::dissemination::SlotProof::Inclusion { sigs: vec![sig(3), sig(1)] },
                crate::dissemination::SlotProof::Exclusion { sigs: vec![] },
                crate::dissemination::SlotProof::Exclusion { sigs: vec![] },
                crate::dissemination::SlotProof::Exclusion { sigs: vec![] },
                crate::dissemination::SlotProof::Exclusion { sigs: vec![] },
            ],
        };
        let order = fetch_candidates(&decided, AuthorityId(0), 5, AuthorityId(1));
        assert_eq!(order[0], AuthorityId(3));
        assert!(!order.contains(&AuthorityId(1)), "never ask oneself");
        assert_eq!(order.len(), 4);
    }
}
