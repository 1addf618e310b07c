//! Canonical byte encoding for documents and digest-vector values.
//!
//! This is the normative layout; digests and signatures are defined over
//! these bytes. All integers are big-endian, all variable-length fields
//! are length-prefixed, so the encoding is injective on canonical inputs
//! and decoding is unambiguous.
//!
//! Status document layout:
//!
//! ```text
//! author       u16
//! epoch        u64
//! relay_count  u32
//! relay entries, each:
//!   fingerprint          u32 len + bytes
//!   nickname             u32 len + utf8
//!   flag_count           u32, then per flag: u32 len + utf8 (sorted, unique)
//!   version              u32 len + utf8
//!   protocols            u32 len + utf8
//!   exit_policy_summary  u32 len + utf8
//!   bandwidth            u8 tag (0 absent / 1 present) + u64 if present
//!   measured             u8 (0 / 1)
//! ```
//!
//! A consensus document (unsigned part) encodes as `epoch u64`,
//! `relay_count u32`, then the same relay entries.

use sha2::{Digest as _, Sha256};

use crate::types::{
    AuthorityId, CanonicalError, ConsensusDocument, Digest, Fingerprint, RelayDescriptor,
    StatusDocument,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("document not canonical: {0}")]
    NotCanonical(#[from] CanonicalError),
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("invalid utf-8 in field {0}")]
    Utf8(&'static str),
    #[error("invalid tag byte {0}")]
    BadTag(u8),
    #[error("flags not sorted or not unique")]
    BadFlags,
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_relay(out: &mut Vec<u8>, r: &RelayDescriptor) {
    put_bytes(out, r.fingerprint.as_bytes());
    put_bytes(out, r.nickname.as_bytes());
    put_u32(out, r.flags.len() as u32);
    for flag in &r.flags {
        put_bytes(out, flag.as_bytes());
    }
    put_bytes(out, r.version.as_bytes());
    put_bytes(out, r.protocols.as_bytes());
    put_bytes(out, r.exit_policy_summary.as_bytes());
    match r.bandwidth {
        Some(bw) => {
            out.push(1);
            put_u64(out, bw);
        }
        None => out.push(0),
    }
    out.push(r.measured as u8);
}

/// Encode a canonical status document. Non-canonical input is rejected.
pub fn canonical_encode(doc: &StatusDocument) -> Result<Vec<u8>, CodecError> {
    check_canonical(&doc.relays)?;
    let mut out = Vec::with_capacity(16 + doc.relays.len() * 96);
    put_u16(&mut out, doc.author.0);
    put_u64(&mut out, doc.epoch);
    put_u32(&mut out, doc.relays.len() as u32);
    for relay in &doc.relays {
        put_relay(&mut out, relay);
    }
    Ok(out)
}

/// Encode the signable (unsigned) part of a consensus document.
pub fn consensus_encode(doc: &ConsensusDocument) -> Result<Vec<u8>, CodecError> {
    check_canonical(&doc.relays)?;
    let mut out = Vec::with_capacity(16 + doc.relays.len() * 96);
    put_u64(&mut out, doc.epoch);
    put_u32(&mut out, doc.relays.len() as u32);
    for relay in &doc.relays {
        put_relay(&mut out, relay);
    }
    Ok(out)
}

fn check_canonical(relays: &[RelayDescriptor]) -> Result<(), CanonicalError> {
    if relays.iter().any(|r| r.fingerprint.0.is_empty()) {
        return Err(CanonicalError::EmptyFingerprint);
    }
    for pair in relays.windows(2) {
        match pair[0].fingerprint.cmp(&pair[1].fingerprint) {
            std::cmp::Ordering::Less => {}
            std::cmp::Ordering::Equal => return Err(CanonicalError::DuplicateFingerprint),
            std::cmp::Ordering::Greater => return Err(CanonicalError::Unsorted),
        }
    }
    Ok(())
}

/// Digest of a canonical status document.
pub fn document_digest(doc: &StatusDocument) -> Result<Digest, CodecError> {
    Ok(hash(&canonical_encode(doc)?))
}

pub fn hash(bytes: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(bytes);
    Digest(h.finalize().into())
}

/// Digest of a digest-vector's entries (proofs excluded), used as the
/// agreement value so differing proof sets do not split votes.
pub fn entries_digest(entries: &[Option<Digest>]) -> Digest {
    let mut out = Vec::with_capacity(1 + 4 + entries.len() * 33);
    out.push(0x56);
    put_u32(&mut out, entries.len() as u32);
    for e in entries {
        match e {
            Some(d) => {
                out.push(1);
                out.extend_from_slice(&d.0);
            }
            None => out.push(0),
        }
    }
    hash(&out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn string(&mut self, field: &'static str) -> Result<String, CodecError> {
        String::from_utf8(self.bytes()?).map_err(|_| CodecError::Utf8(field))
    }
}

fn read_relay(c: &mut Cursor<'_>) -> Result<RelayDescriptor, CodecError> {
    let fingerprint = Fingerprint(c.bytes()?);
    let nickname = c.string("nickname")?;
    let flag_count = c.u32()?;
    let mut flags = std::collections::BTreeSet::new();
    let mut prev: Option<String> = None;
    for _ in 0..flag_count {
        let flag = c.string("flag")?;
        if let Some(p) = &prev {
            if *p >= flag {
                return Err(CodecError::BadFlags);
            }
        }
        prev = Some(flag.clone());
        flags.insert(flag);
    }
    let version = c.string("version")?;
    let protocols = c.string("protocols")?;
    let exit_policy_summary = c.string("exit_policy_summary")?;
    let bandwidth = match c.u8()? {
        0 => None,
        1 => Some(c.u64()?),
        t => return Err(CodecError::BadTag(t)),
    };
    let measured = match c.u8()? {
        0 => false,
        1 => true,
        t => return Err(CodecError::BadTag(t)),
    };
    Ok(RelayDescriptor {
        fingerprint,
        nickname,
        flags,
        version,
        protocols,
        exit_policy_summary,
        bandwidth,
        measured,
    })
}

/// Decode a canonical status document encoding; inverse of
/// [`canonical_encode`] on canonical documents.
pub fn canonical_decode(bytes: &[u8]) -> Result<StatusDocument, CodecError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let author = AuthorityId(c.u16()?);
    let epoch = c.u64()?;
    let relay_count = c.u32()?;
    let mut relays = Vec::with_capacity(relay_count as usize);
    for _ in 0..relay_count {
        relays.push(read_relay(&mut c)?);
    }
    if c.pos != bytes.len() {
        return Err(CodecError::Truncated(c.pos));
    }
    let doc = StatusDocument { author, epoch, relays };
    check_canonical(&doc.relays)?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn relay(fp: &[u8]) -> RelayDescriptor {
        RelayDescriptor {
            fingerprint: Fingerprint(fp.to_vec()),
            nickname: "r".into(),
            flags: BTreeSet::from(["Fast".to_string(), "Running".to_string()]),
            version: "0.4.8.1".into(),
            protocols: "Link=1-5".into(),
            exit_policy_summary: "reject 1-65535".into(),
            bandwidth: Some(1200),
            measured: true,
        }
    }

    #[test]
    fn empty_document_is_header_plus_empty_list() {
        let doc = StatusDocument::new(AuthorityId(0), 7, vec![]).unwrap();
        let enc = canonical_encode(&doc).unwrap();
        // author u16 + epoch u64 + relay_count u32
        assert_eq!(enc.len(), 14);
        assert_eq!(&enc[..2], &[0, 0]);
        assert_eq!(&enc[2..10], &7u64.to_be_bytes());
        assert_eq!(&enc[10..], &[0, 0, 0, 0]);
    }

    #[test]
    fn same_relays_same_encoding_after_canonicalization() {
        let a = StatusDocument::new(AuthorityId(3), 1, vec![relay(b"aa"), relay(b"bb")]).unwrap();
        let b = StatusDocument::new(AuthorityId(3), 1, vec![relay(b"bb"), relay(b"aa")]).unwrap();
        assert_eq!(canonical_encode(&a).unwrap(), canonical_encode(&b).unwrap());
    }

    #[test]
    fn unsorted_or_duplicate_input_rejected() {
        let unsorted = StatusDocument {
            author: AuthorityId(0),
            epoch: 1,
            relays: vec![relay(b"bb"), relay(b"aa")],
        };
        assert!(matches!(
            canonical_encode(&unsorted),
            Err(CodecError::NotCanonical(CanonicalError::Unsorted))
        ));
        let dup = StatusDocument {
            author: AuthorityId(0),
            epoch: 1,
            relays: vec![relay(b"aa"), relay(b"aa")],
        };
        assert!(matches!(
            canonical_encode(&dup),
            Err(CodecError::NotCanonical(CanonicalError::DuplicateFingerprint))
        ));
        assert!(StatusDocument::new(AuthorityId(0), 1, vec![relay(b"aa"), relay(b"aa")]).is_err());
    }

    #[test]
    fn decode_round_trip() {
        let doc =
            StatusDocument::new(AuthorityId(5), 42, vec![relay(b"aa"), relay(b"zz")]).unwrap();
        let enc = canonical_encode(&doc).unwrap();
        assert_eq!(canonical_decode(&enc).unwrap(), doc);
    }

    #[test]
    fn digest_tracks_encoding_equality() {
        let a = StatusDocument::new(AuthorityId(1), 9, vec![relay(b"aa")]).unwrap();
        let b = StatusDocument::new(AuthorityId(1), 9, vec![relay(b"aa")]).unwrap();
        assert_eq!(document_digest(&a).unwrap(), document_digest(&b).unwrap());
        let c = StatusDocument::new(AuthorityId(2), 9, vec![relay(b"aa")]).unwrap();
        assert_ne!(document_digest(&a).unwrap(), document_digest(&c).unwrap());
    }

    #[test]
    fn flipping_one_flag_changes_digest() {
        // brute force over a small document set: every single-flag flip moves
        // the digest
        let base = StatusDocument::new(AuthorityId(0), 1, vec![relay(b"aa"), relay(b"bb")])
            .unwrap();
        let h0 = document_digest(&base).unwrap();
        for i in 0..base.relays.len() {
            for flag in ["Fast", "Running", "Exit", "Guard"] {
                let mut doc = base.clone();
                if !doc.relays[i].flags.remove(flag) {
                    doc.relays[i].flags.insert(flag.to_string());
                }
                assert_ne!(document_digest(&doc).unwrap(), h0, "flip {flag} on relay {i}");
            }
        }
    }

    #[test]
    fn entries_digest_distinguishes_bottom_from_value() {
        let d = hash(b"x");
        let a = entries_digest(&[Some(d), None]);
        let b = entries_digest(&[None, Some(d)]);
        assert_ne!(a, b);
        assert_eq!(a, entries_digest(&[Some(d), None]));
    }
}
