//! Domain types shared by every protocol module: authority identities,
//! relay descriptors, status documents and the merged consensus document.

use std::collections::BTreeSet;
use std::fmt;

use crate::crypto::Signature;

/// Index of a directory authority in `[0, n)`.
///
/// The integer order doubles as the tie-break order when merging relay
/// nicknames ("the vote with the largest authority ID").
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AuthorityId(pub u16);

impl AuthorityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// All authority ids for a cluster of `n` nodes, in order.
    pub fn all(n: u16) -> impl Iterator<Item = AuthorityId> {
        (0..n).map(AuthorityId)
    }
}

impl fmt::Display for AuthorityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Opaque relay identifier; the unique key of a relay entry.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fingerprint(pub Vec<u8>);

impl Fingerprint {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0.iter().take(8) {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// One relay as seen by one authority.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RelayDescriptor {
    pub fingerprint: Fingerprint,
    pub nickname: String,
    pub flags: BTreeSet<String>,
    /// Totally ordered version token (lexicographic order).
    pub version: String,
    /// Totally ordered protocol token (lexicographic order).
    pub protocols: String,
    pub exit_policy_summary: String,
    /// Kbit/s, if the authority has an opinion.
    pub bandwidth: Option<u64>,
    /// Whether `bandwidth` comes from a measurement.
    pub measured: bool,
}

/// One authority's vote: its view of the relay population for an epoch.
///
/// Canonical form requires `relays` sorted by fingerprint with no
/// duplicates; the encoder rejects anything else.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StatusDocument {
    pub author: AuthorityId,
    pub epoch: u64,
    pub relays: Vec<RelayDescriptor>,
}

impl StatusDocument {
    /// Build a canonical document: sorts by fingerprint, rejects duplicates
    /// and empty fingerprints.
    pub fn new(
        author: AuthorityId,
        epoch: u64,
        mut relays: Vec<RelayDescriptor>,
    ) -> Result<Self, CanonicalError> {
        relays.sort_by(|a, b| a.fingerprint.cmp(&b.fingerprint));
        for pair in relays.windows(2) {
            if pair[0].fingerprint == pair[1].fingerprint {
                return Err(CanonicalError::DuplicateFingerprint);
            }
        }
        if relays.iter().any(|r| r.fingerprint.0.is_empty()) {
            return Err(CanonicalError::EmptyFingerprint);
        }
        Ok(StatusDocument { author, epoch, relays })
    }

    pub fn is_canonical(&self) -> bool {
        self.relays.iter().all(|r| !r.fingerprint.0.is_empty())
            && self
                .relays
                .windows(2)
                .all(|p| p[0].fingerprint < p[1].fingerprint)
    }
}

/// Why a document is not in canonical form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum CanonicalError {
    #[error("relay list is not sorted by fingerprint")]
    Unsorted,
    #[error("duplicate relay fingerprint")]
    DuplicateFingerprint,
    #[error("empty relay fingerprint")]
    EmptyFingerprint,
}

/// Fixed-width hash output; equality is byte equality.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const WIDTH: usize = 32;

    pub fn to_hex(self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0.iter().take(8) {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..")
    }
}

/// The merged, multi-signed document all correct authorities publish.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConsensusDocument {
    pub epoch: u64,
    pub relays: Vec<RelayDescriptor>,
    /// Signatures over the canonical encoding of `(epoch, relays)`, from
    /// distinct authorities.
    pub signatures: Vec<Signature>,
}
