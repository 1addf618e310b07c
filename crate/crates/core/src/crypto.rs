//! Domain-separated signatures over `(context ∥ epoch ∥ payload)`.
//!
//! Two interchangeable schemes sit behind [`KeyStore`]: Ed25519 for runs
//! where forgery must actually be infeasible, and a keyed-hash double
//! whose verification is an order of magnitude faster for bulk property
//! runs. Both are deterministic.

use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use crate::types::AuthorityId;

/// Context tags separating every signing domain in the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Context {
    Document = 1,
    ProposalSlot = 2,
    AbsentSlot = 3,
    AgreeVote = 4,
    NewView = 5,
    Consensus = 6,
}

impl Context {
    pub const ALL: [Context; 6] = [
        Context::Document,
        Context::ProposalSlot,
        Context::AbsentSlot,
        Context::AgreeVote,
        Context::NewView,
        Context::Consensus,
    ];
}

/// A signature attributed to an authority; meaningful only together with
/// the `(context, epoch, payload)` it was produced over.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Signature {
    pub signer: AuthorityId,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    /// Keyed-hash test double; fast, forgeable by anyone holding the key
    /// table, fine for honest-scheduler property runs.
    Mac,
    /// Real Ed25519 over the same message bytes.
    Ed25519,
}

/// Key material for an `n`-authority cluster. Keys are scenario inputs;
/// there is no distribution protocol.
pub struct KeyStore {
    kind: SchemeKind,
    mac_keys: Vec<[u8; 32]>,
    signing: Vec<SigningKey>,
    verifying: Vec<VerifyingKey>,
}

impl KeyStore {
    pub fn generate(n: u16, kind: SchemeKind, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6b65_7973);
        let mut mac_keys = Vec::with_capacity(n as usize);
        let mut signing = Vec::new();
        let mut verifying = Vec::new();
        for _ in 0..n {
            let mut k = [0u8; 32];
            rng.fill_bytes(&mut k);
            mac_keys.push(k);
            if kind == SchemeKind::Ed25519 {
                let mut sk = [0u8; 32];
                rng.fill_bytes(&mut sk);
                let key = SigningKey::from_bytes(&sk);
                verifying.push(key.verifying_key());
                signing.push(key);
            }
        }
        KeyStore { kind, mac_keys, signing, verifying }
    }

    pub fn n(&self) -> u16 {
        self.mac_keys.len() as u16
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    fn message(context: Context, epoch: u64, payload: &[u8]) -> Vec<u8> {
        let mut m = Vec::with_capacity(9 + payload.len());
        m.push(context as u8);
        m.extend_from_slice(&epoch.to_be_bytes());
        m.extend_from_slice(payload);
        m
    }

    pub fn sign(
        &self,
        signer: AuthorityId,
        context: Context,
        epoch: u64,
        payload: &[u8],
    ) -> Signature {
        let msg = Self::message(context, epoch, payload);
        let bytes = match self.kind {
            SchemeKind::Mac => {
                let mut h = Sha256::new();
                h.update(self.mac_keys[signer.index()]);
                h.update(&msg);
                h.finalize().to_vec()
            }
            SchemeKind::Ed25519 => self.signing[signer.index()].sign(&msg).to_bytes().to_vec(),
        };
        Signature { signer, bytes }
    }

    pub fn verify(
        &self,
        context: Context,
        epoch: u64,
        payload: &[u8],
        sig: &Signature,
    ) -> bool {
        if sig.signer.index() >= self.mac_keys.len() {
            return false;
        }
        let msg = Self::message(context, epoch, payload);
        match self.kind {
            SchemeKind::Mac => {
                let mut h = Sha256::new();
                h.update(self.mac_keys[sig.signer.index()]);
                h.update(&msg);
                h.finalize().as_slice() == sig.bytes.as_slice()
            }
            SchemeKind::Ed25519 => {
                let Ok(parsed) = ed25519_dalek::Signature::from_slice(&sig.bytes) else {
                    return false;
                };
                self.verifying[sig.signer.index()].verify(&msg, &parsed).is_ok()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schemes() -> [KeyStore; 2] {
        [
            KeyStore::generate(4, SchemeKind::Mac, 7),
            KeyStore::generate(4, SchemeKind::Ed25519, 7),
        ]
    }

    #[test]
    fn round_trip_verifies() {
        for keys in schemes() {
            let sig = keys.sign(AuthorityId(2), Context::Document, 5, b"payload");
            assert!(keys.verify(Context::Document, 5, b"payload", &sig));
        }
    }

    #[test]
    fn wrong_signer_key_fails() {
        for keys in schemes() {
            let mut sig = keys.sign(AuthorityId(2), Context::Document, 5, b"payload");
            sig.signer = AuthorityId(3);
            assert!(!keys.verify(Context::Document, 5, b"payload", &sig));
        }
    }

    #[test]
    fn domain_separation_is_exhaustive() {
        // no signature verifies under a different context tag or epoch
        for keys in schemes() {
            for ctx in Context::ALL {
                let sig = keys.sign(AuthorityId(1), ctx, 9, b"m");
                for other in Context::ALL {
                    assert_eq!(keys.verify(other, 9, b"m", &sig), ctx == other);
                }
                assert!(!keys.verify(ctx, 10, b"m", &sig));
            }
        }
    }

    #[test]
    fn tampered_payload_fails() {
        for keys in schemes() {
            let sig = keys.sign(AuthorityId(0), Context::Consensus, 1, b"abc");
            assert!(!keys.verify(Context::Consensus, 1, b"abd", &sig));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = KeyStore::generate(3, SchemeKind::Ed25519, 42);
        let b = KeyStore::generate(3, SchemeKind::Ed25519, 42);
        let sa = a.sign(AuthorityId(0), Context::Document, 1, b"x");
        let sb = b.sign(AuthorityId(0), Context::Document, 1, b"x");
        assert_eq!(sa, sb);
    }
}
