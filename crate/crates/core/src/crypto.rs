//! Hashing and the (k, n)-threshold signature contract.
//!
//! Replicas only ever talk to a [`CryptoProvider`]. The default provider is
//! [`MockProvider`]: partial signatures are keyed hashes over per-signer
//! secrets derived from the run seed, and a combined signature is simply the
//! set of valid parts. It is deterministic and replayable, and an adversary
//! holding a corrupted replica's seed can forge only that replica's parts.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Index of a replica, `0..n`.
pub type ReplicaId = usize;

pub const DIGEST_LEN: usize = 32;

/// Fixed-length identifier produced by [`hash`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; DIGEST_LEN] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))?;
        Ok(Digest(arr))
    }
}

/// The message digest function used for node identity and signing payloads.
pub fn hash(payload: &[u8]) -> Digest {
    let out = Sha256::digest(payload);
    let digest = Digest(out.into());
    #[cfg(test)]
    registry::record(payload, digest);
    digest
}

fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Records every hashed input and reports the first collision seen.
///
/// Unit tests of this crate feed every [`hash`] call through a thread-local
/// instance; other test targets can construct one directly.
#[derive(Debug, Default)]
pub struct CollisionRegistry {
    seen: BTreeMap<Digest, Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("hash collision on {digest:?}")]
pub struct Collision {
    pub digest: Digest,
    pub first: Vec<u8>,
    pub second: Vec<u8>,
}

impl CollisionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hash(&mut self, payload: &[u8]) -> Result<Digest, Collision> {
        let digest = Digest(Sha256::digest(payload).into());
        match self.seen.get(&digest) {
            Some(prev) if prev.as_slice() != payload => Err(Collision {
                digest,
                first: prev.clone(),
                second: payload.to_vec(),
            }),
            Some(_) => Ok(digest),
            None => {
                self.seen.insert(digest, payload.to_vec());
                Ok(digest)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

#[cfg(test)]
mod registry {
    use std::cell::RefCell;

    use super::{CollisionRegistry, Digest};

    thread_local! {
        static REGISTRY: RefCell<CollisionRegistry> = RefCell::new(CollisionRegistry::new());
    }

    pub(super) fn record(payload: &[u8], digest: Digest) {
        REGISTRY.with(|r| {
            let got = r.borrow_mut().hash(payload).expect("mock hash collision");
            debug_assert_eq!(got, digest);
        });
    }

    pub(crate) fn entries() -> usize {
        REGISTRY.with(|r| r.borrow().len())
    }
}

/// A replica's contribution to a threshold signature.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct PartialSig {
    pub signer: ReplicaId,
    pub payload_digest: Digest,
    pub tag: Digest,
}

/// A combined signature: the set of valid parts over one payload, sorted by
/// signer with no duplicates.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct ThresholdSig {
    pub payload_digest: Digest,
    pub parts: Vec<PartialSig>,
}

impl ThresholdSig {
    pub fn signers(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        self.parts.iter().map(|p| p.signer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("signer {signer} out of range for n = {n}")]
    SignerOutOfRange { signer: ReplicaId, n: usize },
    #[error("insufficient shares: {have} distinct valid of {need} required")]
    InsufficientShares { have: usize, need: usize },
    #[error("part from signer {signer} signs a different payload")]
    MismatchedPayload { signer: ReplicaId },
}

/// The oracle contract replicas rely on: `tsign`, `tcombine`, `tverify`
/// with threshold `k = 2f + 1`, plus the hash function.
pub trait CryptoProvider: Send + Sync + fmt::Debug {
    fn n(&self) -> usize;
    fn f(&self) -> usize;

    fn threshold(&self) -> usize {
        2 * self.f() + 1
    }

    fn hash(&self, payload: &[u8]) -> Digest {
        hash(payload)
    }

    fn tsign(&self, signer: ReplicaId, payload: &[u8]) -> Result<PartialSig, CryptoError>;

    /// Checks one part against `payload`.
    fn verify_partial(&self, payload: &[u8], part: &PartialSig) -> bool;

    fn tcombine(&self, payload: &[u8], parts: &[PartialSig]) -> Result<ThresholdSig, CryptoError> {
        let digest = self.hash(payload);
        let mut valid: BTreeMap<ReplicaId, PartialSig> = BTreeMap::new();
        for part in parts {
            if part.payload_digest != digest {
                return Err(CryptoError::MismatchedPayload {
                    signer: part.signer,
                });
            }
            if self.verify_partial(payload, part) {
                valid.entry(part.signer).or_insert_with(|| part.clone());
            }
        }
        let need = self.threshold();
        if valid.len() < need {
            return Err(CryptoError::InsufficientShares {
                have: valid.len(),
                need,
            });
        }
        Ok(ThresholdSig {
            payload_digest: digest,
            parts: valid.into_values().collect(),
        })
    }

    fn tverify(&self, payload: &[u8], sig: &ThresholdSig) -> bool {
        let digest = self.hash(payload);
        if sig.payload_digest != digest {
            return false;
        }
        let mut last: Option<ReplicaId> = None;
        for part in &sig.parts {
            if last.is_some_and(|l| l >= part.signer) {
                return false;
            }
            last = Some(part.signer);
            if part.payload_digest != digest || !self.verify_partial(payload, part) {
                return false;
            }
        }
        sig.parts.len() >= self.threshold()
    }
}

/// Deterministic default provider. Not cryptographically secure.
#[derive(Clone)]
pub struct MockProvider {
    n: usize,
    f: usize,
    seeds: Vec<Digest>,
}

impl fmt::Debug for MockProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockProvider")
            .field("n", &self.n)
            .field("f", &self.f)
            .finish_non_exhaustive()
    }
}

impl MockProvider {
    pub fn new(n: usize, f: usize, run_seed: u64) -> Self {
        let seeds = (0..n)
            .map(|i| {
                hash_parts(&[
                    b"mock-signer-secret",
                    &run_seed.to_le_bytes(),
                    &(i as u64).to_le_bytes(),
                ])
            })
            .collect();
        MockProvider { n, f, seeds }
    }

    fn tag(&self, signer: ReplicaId, payload_digest: &Digest) -> Digest {
        hash_parts(&[&self.seeds[signer].0, &payload_digest.0])
    }
}

impl CryptoProvider for MockProvider {
    fn n(&self) -> usize {
        self.n
    }

    fn f(&self) -> usize {
        self.f
    }

    fn tsign(&self, signer: ReplicaId, payload: &[u8]) -> Result<PartialSig, CryptoError> {
        if signer >= self.n {
            return Err(CryptoError::SignerOutOfRange { signer, n: self.n });
        }
        let payload_digest = self.hash(payload);
        Ok(PartialSig {
            signer,
            payload_digest,
            tag: self.tag(signer, &payload_digest),
        })
    }

    fn verify_partial(&self, payload: &[u8], part: &PartialSig) -> bool {
        if part.signer >= self.n {
            return false;
        }
        let digest = self.hash(payload);
        part.payload_digest == digest && part.tag == self.tag(part.signer, &digest)
    }
}
