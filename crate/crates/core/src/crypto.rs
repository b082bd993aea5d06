//! Simulated authentication primitives.
//!
//! Digests are SHA-256. Signatures are keyed-hash authenticators: every
//! replica owns a 32-byte secret derived from the run seed, and the
//! [`KeyRegistry`] (the verifier side) holds all of them. Inside the
//! simulation this is unforgeable: a replica only ever receives its own
//! [`Signer`].

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

/// Index of a replica in `[0, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplicaId(pub u32);

impl ReplicaId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Short prefix for logs and traces.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Hash a byte string.
pub fn digest(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Incremental hasher for multi-part messages. Every part is fed as-is, so
/// callers are responsible for unambiguous framing (fixed widths or
/// explicit lengths).
#[derive(Clone, Default)]
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new() -> Self {
        Self(Sha256::new())
    }

    pub fn with_domain(domain: &str) -> Self {
        let mut h = Self::new();
        h.update(&(domain.len() as u32).to_be_bytes());
        h.update(domain.as_bytes());
        h
    }

    pub fn update(&mut self, data: &[u8]) -> &mut Self {
        self.0.update(data);
        self
    }

    pub fn finish(self) -> Digest {
        Digest(self.0.finalize().into())
    }
}

/// An authenticator produced by [`Signer::sign`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub signer: ReplicaId,
    pub tag: [u8; 32],
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sig({}, {})", self.signer, hex::encode(&self.tag[..4]))
    }
}

fn keyed_tag(secret: &[u8; 32], signer: ReplicaId, msg: &Digest) -> [u8; 32] {
    let mut h = Hasher::with_domain("tipcut/sig/v1");
    h.update(secret).update(&signer.0.to_be_bytes()).update(&msg.0);
    h.finish().0
}

/// Signing capability of exactly one replica.
#[derive(Clone)]
pub struct Signer {
    id: ReplicaId,
    secret: [u8; 32],
}

impl Signer {
    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn sign(&self, msg: &Digest) -> Signature {
        Signature {
            signer: self.id,
            tag: keyed_tag(&self.secret, self.id, msg),
        }
    }
}

impl fmt::Debug for Signer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Signer").field("id", &self.id).finish_non_exhaustive()
    }
}

/// Verifier registry: per-replica secrets plus a client master secret for
/// transaction authentication.
pub struct KeyRegistry {
    secrets: Vec<[u8; 32]>,
    client_secret: [u8; 32],
}

impl KeyRegistry {
    /// Derive `n` replica secrets from the run seed.
    pub fn generate(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5167_6e65_725f_6b65);
        let secrets = (0..n)
            .map(|_| {
                let mut s = [0u8; 32];
                rng.fill_bytes(&mut s);
                s
            })
            .collect();
        let mut client_secret = [0u8; 32];
        rng.fill_bytes(&mut client_secret);
        Self {
            secrets,
            client_secret,
        }
    }

    pub fn len(&self) -> usize {
        self.secrets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.secrets.is_empty()
    }

    /// Hand out the signing key of `id`. Returns `None` for unknown replicas.
    pub fn signer(&self, id: ReplicaId) -> Option<Signer> {
        self.secrets.get(id.index()).map(|s| Signer {
            id,
            secret: *s,
        })
    }

    /// Convenience for tests and tooling that own the whole registry.
    pub fn sign(&self, signer: ReplicaId, msg: &Digest) -> Option<Signature> {
        self.signer(signer).map(|s| s.sign(msg))
    }

    /// True iff `sig` was produced by `sig.signer` over `msg`. Unknown
    /// signers are rejected.
    pub fn verify(&self, sig: &Signature, msg: &Digest) -> bool {
        match self.secrets.get(sig.signer.index()) {
            Some(secret) => ct_eq(&keyed_tag(secret, sig.signer, msg), &sig.tag),
            None => false,
        }
    }

    /// 65-byte client signature over a transaction body digest. The first
    /// 32 bytes carry the tag; the remainder is zero.
    pub fn client_sign(&self, sender: &[u8; 20], body: &Digest) -> [u8; 65] {
        let mut out = [0u8; 65];
        out[..32].copy_from_slice(&self.client_tag(sender, body));
        out
    }

    pub fn client_verify(&self, sender: &[u8; 20], body: &Digest, sig: &[u8; 65]) -> bool {
        sig[32..].iter().all(|b| *b == 0) && ct_eq(&self.client_tag(sender, body), &sig[..32])
    }

    fn client_tag(&self, sender: &[u8; 20], body: &Digest) -> [u8; 32] {
        let mut h = Hasher::with_domain("tipcut/client-sig/v1");
        h.update(&self.client_secret).update(sender).update(&body.0);
        h.finish().0
    }
}

fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_deterministic_and_distinguishes_inputs() {
        assert_eq!(digest(b"abc"), digest(b"abc"));
        assert_ne!(digest(b""), digest(b"a"));
        // SHA-256("") known answer.
        assert_eq!(
            digest(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn digest_of_large_batch() {
        let batch: Vec<u8> = (0..(1usize << 20)).map(|i| (i * 31 % 251) as u8).collect();
        let d = digest(&batch);
        assert_eq!(d.as_bytes().len(), 32);
        assert_eq!(d, digest(&batch));
    }

    #[test]
    fn sign_verify_roundtrip_and_tamper() {
        let reg = KeyRegistry::generate(4, 7);
        let m = digest(b"message");
        let m2 = digest(b"other");
        let sig = reg.signer(ReplicaId(0)).unwrap().sign(&m);
        assert!(reg.verify(&sig, &m));
        assert!(!reg.verify(&sig, &m2));

        let mut bad = sig;
        bad.tag[5] ^= 1;
        assert!(!reg.verify(&bad, &m));
    }

    #[test]
    fn swapped_signer_is_rejected() {
        let reg = KeyRegistry::generate(4, 7);
        let m = digest(b"vote");
        let mut sig = reg.sign(ReplicaId(1), &m).unwrap();
        sig.signer = ReplicaId(2);
        assert!(!reg.verify(&sig, &m));
    }

    #[test]
    fn unknown_signer_is_rejected() {
        let reg = KeyRegistry::generate(4, 7);
        let m = digest(b"x");
        assert!(reg.signer(ReplicaId(4)).is_none());
        let mut sig = reg.sign(ReplicaId(3), &m).unwrap();
        sig.signer = ReplicaId(9);
        assert!(!reg.verify(&sig, &m));
    }

    #[test]
    fn seeds_give_distinct_secrets() {
        let a = KeyRegistry::generate(2, 1);
        let b = KeyRegistry::generate(2, 2);
        let m = digest(b"m");
        let sa = a.sign(ReplicaId(0), &m).unwrap();
        assert!(!b.verify(&sa, &m));
    }

    #[test]
    fn client_signatures() {
        let reg = KeyRegistry::generate(1, 3);
        let sender = [7u8; 20];
        let body = digest(b"tx body");
        let sig = reg.client_sign(&sender, &body);
        assert!(reg.client_verify(&sender, &body, &sig));
        assert!(!reg.client_verify(&[8u8; 20], &body, &sig));
        let mut bad = sig;
        bad[64] = 1;
        assert!(!reg.client_verify(&sender, &body, &bad));
    }
}
