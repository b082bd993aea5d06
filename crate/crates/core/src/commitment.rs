//! Post-finality state commitments.
//!
//! The commitment is the wrapping 256-bit sum of
//! `digest(kind ‖ address ‖ [key] ‖ value)` over every state entry. It is
//! order-independent and each write updates it in O(1):
//! `c − digest(old) + digest(new)`.
//!
//! Validators attest `(height, commitment)`; a height is committed once one
//! value carries at least 2/3 of the stake, and state consensus halts once
//! stake attesting other values exceeds 1/3.
//!
//! Membership and non-membership proofs come from a sorted snapshot index
//! hashed into a binary tree. The index is built off the execution path
//! ([`build_index_async`]) and its root is bound to the height and the
//! additive commitment it was built from.

use std::collections::{BTreeMap, BTreeSet};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::crypto::{Digest, Hasher, KeyRegistry, ReplicaId, Signature, Signer};
use crate::state_machine::{Location, WorldState};
use crate::types::{u256_to_word, Word, U256};

/// Upper bound (exclusive) on the distance between an executed height and
/// the block whose cut commits its state quorum.
pub const MAX_STATE_LAG: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateCommitment {
    pub value: Word,
    pub height: u64,
}

impl StateCommitment {
    pub fn is_zero(&self) -> bool {
        self.value == [0u8; 32]
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.value)
    }
}

/// `kind(1) ‖ address(20) ‖ [key(32)] ‖ value(32)`.
pub fn encode_entry(loc: &Location, value: &Word) -> Vec<u8> {
    let mut out = Vec::with_capacity(85);
    loc.encode_into(&mut out);
    out.extend_from_slice(value);
    out
}

pub fn entry_digest(loc: &Location, value: &Word) -> U256 {
    U256::from_big_endian(&crate::crypto::digest(&encode_entry(loc, value)).0)
}

pub(crate) fn update_raw(
    c: U256,
    old: Option<&(Location, Word)>,
    new: Option<&(Location, Word)>,
) -> U256 {
    let mut c = c;
    if let Some((l, v)) = old {
        c = c.overflowing_sub(entry_digest(l, v)).0;
    }
    if let Some((l, v)) = new {
        c = c.overflowing_add(entry_digest(l, v)).0;
    }
    c
}

/// Recompute from scratch. Used as the audit for the incremental value.
pub fn commit_of_state(state: &WorldState) -> StateCommitment {
    let sum = state
        .entries()
        .fold(U256::zero(), |acc, (l, v)| acc.overflowing_add(entry_digest(l, v)).0);
    StateCommitment {
        value: u256_to_word(sum),
        height: state.height(),
    }
}

/// O(1) update. `old` must be the entry currently present (if any).
pub fn update_commitment(
    c: StateCommitment,
    old: Option<(Location, Word)>,
    new: Option<(Location, Word)>,
) -> StateCommitment {
    let v = update_raw(U256::from_big_endian(&c.value), old.as_ref(), new.as_ref());
    StateCommitment {
        value: u256_to_word(v),
        height: c.height,
    }
}

pub fn attestation_message(height: u64, commitment: &Word) -> Digest {
    let mut h = Hasher::with_domain("tipcut/state-attest/v1");
    h.update(&height.to_be_bytes()).update(commitment);
    h.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateAttestation {
    pub height: u64,
    pub commitment: Word,
    pub signer: ReplicaId,
    pub sig: Signature,
}

impl StateAttestation {
    pub fn verify(&self, registry: &KeyRegistry) -> bool {
        self.sig.signer == self.signer
            && registry.verify(&self.sig, &attestation_message(self.height, &self.commitment))
    }
}

pub fn attest(signer: &Signer, height: u64, commitment: Word) -> StateAttestation {
    StateAttestation {
        height,
        commitment,
        signer: signer.id(),
        sig: signer.sign(&attestation_message(height, &commitment)),
    }
}

/// A height whose commitment gathered a 2/3 stake quorum.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateQuorumRecord {
    pub height: u64,
    pub commitment: Word,
    pub attesting_stake: u64,
    pub total_stake: u64,
    /// `(signer, signature)` in ascending signer order.
    pub signatures: Vec<Signature>,
    /// Block height of the cut that embedded this record, once committed.
    pub committed_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("record truncated")]
    Truncated,
    #[error("signer bitmap names replica {0} outside the validator set")]
    BitmapOutOfRange(u32),
    #[error("{0} trailing byte(s)")]
    Trailing(usize),
}

impl StateQuorumRecord {
    /// `committed_at − height`, once committed.
    pub fn delay(&self) -> Option<u64> {
        self.committed_at.map(|c| c.saturating_sub(self.height))
    }

    pub fn signers(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        self.signatures.iter().map(|s| s.signer)
    }

    /// `height(8 BE) ‖ commitment(32) ‖ signer bitmap(ceil(n/8)) ‖
    /// signatures(32 each, ascending signer)`. Bit `i` of the bitmap is bit
    /// `7 − i % 8` of byte `i / 8`.
    pub fn encode(&self, n: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + n.div_ceil(8) + 32 * self.signatures.len());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.commitment);
        let mut bitmap = vec![0u8; n.div_ceil(8)];
        let mut sigs: Vec<_> = self.signatures.clone();
        sigs.sort_by_key(|s| s.signer);
        for s in &sigs {
            let i = s.signer.index();
            bitmap[i / 8] |= 0x80 >> (i % 8);
        }
        out.extend_from_slice(&bitmap);
        for s in &sigs {
            out.extend_from_slice(&s.tag);
        }
        out
    }

    /// Inverse of [`encode`](Self::encode); stake fields are recomputed from
    /// `stakes`.
    pub fn decode(buf: &[u8], stakes: &[u64]) -> Result<Self, RecordError> {
        let n = stakes.len();
        let bm_len = n.div_ceil(8);
        if buf.len() < 40 + bm_len {
            return Err(RecordError::Truncated);
        }
        let height = u64::from_be_bytes(buf[..8].try_into().expect("8 bytes"));
        let commitment: Word = buf[8..40].try_into().expect("32 bytes");
        let bitmap = &buf[40..40 + bm_len];
        let mut rest = &buf[40 + bm_len..];
        let mut signatures = Vec::new();
        for i in 0..bm_len * 8 {
            if bitmap[i / 8] & (0x80 >> (i % 8)) == 0 {
                continue;
            }
            if i >= n {
                return Err(RecordError::BitmapOutOfRange(i as u32));
            }
            if rest.len() < 32 {
                return Err(RecordError::Truncated);
            }
            signatures.push(Signature {
                signer: ReplicaId(i as u32),
                tag: rest[..32].try_into().expect("32 bytes"),
            });
            rest = &rest[32..];
        }
        if !rest.is_empty() {
            return Err(RecordError::Trailing(rest.len()));
        }
        let attesting_stake = signatures.iter().map(|s| stakes[s.signer.index()]).sum();
        Ok(Self {
            height,
            commitment,
            attesting_stake,
            total_stake: stakes.iter().sum(),
            signatures,
            committed_at: None,
        })
    }

    /// All signatures valid over `(height, commitment)`, distinct signers,
    /// and at least 2/3 of the total stake.
    pub fn verify(&self, registry: &KeyRegistry, stakes: &[u64]) -> bool {
        let msg = attestation_message(self.height, &self.commitment);
        let mut seen = BTreeSet::new();
        let mut stake = 0u64;
        for s in &self.signatures {
            let Some(w) = stakes.get(s.signer.index()) else {
                return false;
            };
            if !seen.insert(s.signer) || !registry.verify(s, &msg) {
                return false;
            }
            stake += w;
        }
        let total: u64 = stakes.iter().sum();
        total > 0 && is_two_thirds(stake, total)
    }
}

fn is_two_thirds(part: u64, total: u64) -> bool {
    3 * part as u128 >= 2 * total as u128
}

fn exceeds_one_third(part: u64, total: u64) -> bool {
    3 * part as u128 > total as u128
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TallyOutcome {
    Committed(StateQuorumRecord),
    Pending,
    /// Stake attesting values other than the leading one, as a fraction of
    /// the total.
    Halted { diverging_stake: u64, total_stake: u64 },
}

impl TallyOutcome {
    pub fn phi(&self) -> Option<f64> {
        match self {
            TallyOutcome::Halted {
                diverging_stake,
                total_stake,
            } => Some(*diverging_stake as f64 / *total_stake as f64),
            _ => None,
        }
    }
}

/// Tally one height's attestations. Attestations are assumed verified;
/// repeats from one validator keep the first.
pub fn tally(attestations: &[StateAttestation], stakes: &[u64]) -> TallyOutcome {
    let total: u64 = stakes.iter().sum();
    let mut first: BTreeMap<ReplicaId, &StateAttestation> = BTreeMap::new();
    for a in attestations {
        first.entry(a.signer).or_insert(a);
    }
    let mut by_value: BTreeMap<Word, (u64, Vec<Signature>)> = BTreeMap::new();
    let mut attested = 0u64;
    let mut height = 0;
    for a in first.values() {
        let w = stakes.get(a.signer.index()).copied().unwrap_or(0);
        let e = by_value.entry(a.commitment).or_default();
        e.0 += w;
        e.1.push(a.sig);
        attested += w;
        height = a.height;
    }
    // Leading value: most stake, ties to the smaller commitment.
    let Some((value, (stake, sigs))) = by_value
        .iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.0.cmp(a.0)))
    else {
        return TallyOutcome::Pending;
    };
    if total > 0 && is_two_thirds(*stake, total) {
        return TallyOutcome::Committed(StateQuorumRecord {
            height,
            commitment: *value,
            attesting_stake: *stake,
            total_stake: total,
            signatures: sigs.clone(),
            committed_at: None,
        });
    }
    let diverging = attested - stake;
    if exceeds_one_third(diverging, total) {
        return TallyOutcome::Halted {
            diverging_stake: diverging,
            total_stake: total,
        };
    }
    TallyOutcome::Pending
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttestationEffect {
    Recorded,
    /// Same validator, same height, already counted.
    Duplicate,
    /// The height already has a final outcome.
    Late,
    Invalid,
}

/// Incremental per-height tally with duplicate detection.
pub struct StateConsensus {
    stakes: Vec<u64>,
    pending: BTreeMap<u64, Vec<StateAttestation>>,
    outcomes: BTreeMap<u64, TallyOutcome>,
    duplicates: u64,
}

impl StateConsensus {
    pub fn new(stakes: Vec<u64>) -> Self {
        Self {
            stakes,
            pending: BTreeMap::new(),
            outcomes: BTreeMap::new(),
            duplicates: 0,
        }
    }

    pub fn add(&mut self, att: StateAttestation, registry: &KeyRegistry) -> AttestationEffect {
        if !att.verify(registry) || att.signer.index() >= self.stakes.len() {
            return AttestationEffect::Invalid;
        }
        if self.outcomes.contains_key(&att.height) {
            return AttestationEffect::Late;
        }
        let list = self.pending.entry(att.height).or_default();
        if list.iter().any(|a| a.signer == att.signer) {
            self.duplicates += 1;
            return AttestationEffect::Duplicate;
        }
        list.push(att);
        let outcome = tally(list, &self.stakes);
        if outcome != TallyOutcome::Pending {
            self.pending.remove(&att.height);
            self.outcomes.insert(att.height, outcome);
        }
        AttestationEffect::Recorded
    }

    pub fn outcome(&self, height: u64) -> Option<&TallyOutcome> {
        self.outcomes.get(&height)
    }

    pub fn outcomes(&self) -> impl Iterator<Item = (&u64, &TallyOutcome)> {
        self.outcomes.iter()
    }

    pub fn halted(&self) -> Option<(u64, &TallyOutcome)> {
        self.outcomes
            .iter()
            .find(|(_, o)| matches!(o, TallyOutcome::Halted { .. }))
            .map(|(h, o)| (*h, o))
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn pending_heights(&self) -> impl Iterator<Item = &u64> {
        self.pending.keys()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("state quorum for height {height} would be committed at height {at}: lag {lag} >= {MAX_STATE_LAG}")]
pub struct StateLagError {
    pub height: u64,
    pub at: u64,
    pub lag: u64,
}

/// Stamp `ready` records with the embedding block height. Heights at or
/// beyond the block itself are held back; a lag of [`MAX_STATE_LAG`] or more
/// is a stall and reported as an error.
pub fn embed_in_cut(
    ready: &[StateQuorumRecord],
    block_height: u64,
) -> Result<Vec<StateQuorumRecord>, StateLagError> {
    let mut out = Vec::new();
    for r in ready.iter().filter(|r| r.height < block_height) {
        let lag = block_height - r.height;
        if lag >= MAX_STATE_LAG {
            return Err(StateLagError {
                height: r.height,
                at: block_height,
                lag,
            });
        }
        let mut r = r.clone();
        r.committed_at = Some(block_height);
        out.push(r);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Snapshot index and batch proofs.

fn leaf_hash(key: &[u8], value: &Word) -> Digest {
    let mut h = Hasher::new();
    h.update(&[0x00]).update(&(key.len() as u8).to_be_bytes()).update(key).update(value);
    h.finish()
}

fn node_hash(l: &Digest, r: &Digest) -> Digest {
    let mut h = Hasher::new();
    h.update(&[0x01]).update(&l.0).update(&r.0);
    h.finish()
}

/// Root that a light verifier trusts: the tree root bound to the height,
/// the additive commitment and the leaf count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRoot {
    pub height: u64,
    pub commitment: Word,
    pub leaf_count: u64,
    pub tree_root: Digest,
}

impl IndexRoot {
    pub fn anchor(&self) -> Digest {
        let mut h = Hasher::with_domain("tipcut/index-root/v1");
        h.update(&self.height.to_be_bytes())
            .update(&self.commitment)
            .update(&self.leaf_count.to_be_bytes())
            .update(&self.tree_root.0);
        h.finish()
    }
}

/// Sorted `(encoded key, value)` snapshot with all tree levels.
pub struct SnapshotIndex {
    height: u64,
    commitment: Word,
    keys: Vec<Vec<u8>>,
    values: Vec<Word>,
    levels: Vec<Vec<Digest>>,
}

impl SnapshotIndex {
    pub fn build(state: &WorldState) -> Self {
        let mut keys = Vec::with_capacity(state.len());
        let mut values = Vec::with_capacity(state.len());
        for (l, v) in state.entries() {
            keys.push(l.encode());
            values.push(*v);
        }
        // BTreeMap order on Location equals byte order of the encoding.
        debug_assert!(keys.windows(2).all(|w| w[0] < w[1]));
        let leaves: Vec<Digest> = keys.iter().zip(&values).map(|(k, v)| leaf_hash(k, v)).collect();
        let mut levels = vec![leaves];
        while levels.last().expect("non-empty").len() > 1 {
            let prev = levels.last().expect("non-empty");
            let next = prev
                .chunks(2)
                .map(|c| if c.len() == 2 { node_hash(&c[0], &c[1]) } else { c[0] })
                .collect();
            levels.push(next);
        }
        Self {
            height: state.height(),
            commitment: state.commitment().value,
            keys,
            values,
            levels,
        }
    }

    pub fn root(&self) -> IndexRoot {
        let tree_root = self
            .levels
            .last()
            .and_then(|l| l.first())
            .copied()
            .unwrap_or(Digest::ZERO);
        IndexRoot {
            height: self.height,
            commitment: self.commitment,
            leaf_count: self.keys.len() as u64,
            tree_root,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn path(&self, mut idx: usize) -> Vec<Digest> {
        let mut path = Vec::new();
        for level in &self.levels[..self.levels.len() - 1] {
            let sib = idx ^ 1;
            if sib < level.len() {
                path.push(level[sib]);
            }
            idx /= 2;
        }
        path
    }

    fn leaf(&self, idx: usize) -> LeafProof {
        LeafProof {
            index: idx as u64,
            key: self.keys[idx].clone(),
            value: self.values[idx],
            path: self.path(idx),
        }
    }
}

/// Build the snapshot index on a background thread.
pub fn build_index_async(state: WorldState) -> JoinHandle<SnapshotIndex> {
    std::thread::spawn(move || SnapshotIndex::build(&state))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeafProof {
    pub index: u64,
    pub key: Vec<u8>,
    pub value: Word,
    pub path: Vec<Digest>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KeyProof {
    Present(LeafProof),
    /// Neighbours in the sorted index; either may be missing at the edges.
    Absent {
        key: Vec<u8>,
        left: Option<LeafProof>,
        right: Option<LeafProof>,
    },
}

impl KeyProof {
    pub fn key(&self) -> &[u8] {
        match self {
            KeyProof::Present(p) => &p.key,
            KeyProof::Absent { key, .. } => key,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchProof {
    pub height: u64,
    pub items: Vec<KeyProof>,
}

impl BatchProof {
    /// `(key, Some(value))` for members, `(key, None)` for proven absence.
    pub fn claims(&self) -> Vec<(Location, Option<Word>)> {
        self.items
            .iter()
            .filter_map(|i| {
                let (loc, _) = Location::decode(i.key())?;
                Some((
                    loc,
                    match i {
                        KeyProof::Present(p) => Some(p.value),
                        KeyProof::Absent { .. } => None,
                    },
                ))
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        fn leaf(out: &mut Vec<u8>, p: &LeafProof) {
            out.extend_from_slice(&p.index.to_be_bytes());
            out.push(p.key.len() as u8);
            out.extend_from_slice(&p.key);
            out.extend_from_slice(&p.value);
            out.push(p.path.len() as u8);
            for d in &p.path {
                out.extend_from_slice(&d.0);
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&(self.items.len() as u32).to_be_bytes());
        for item in &self.items {
            match item {
                KeyProof::Present(p) => {
                    out.push(0x01);
                    leaf(&mut out, p);
                }
                KeyProof::Absent { key, left, right } => {
                    out.push(0x02);
                    out.push(key.len() as u8);
                    out.extend_from_slice(key);
                    for side in [left, right] {
                        match side {
                            Some(p) => {
                                out.push(1);
                                leaf(&mut out, p);
                            }
                            None => out.push(0),
                        }
                    }
                }
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Option<Self> {
        struct R<'a>(&'a [u8]);
        impl<'a> R<'a> {
            fn take(&mut self, n: usize) -> Option<&'a [u8]> {
                if self.0.len() < n {
                    return None;
                }
                let (a, b) = self.0.split_at(n);
                self.0 = b;
                Some(a)
            }
            fn u8(&mut self) -> Option<u8> {
                self.take(1).map(|b| b[0])
            }
            fn leaf(&mut self) -> Option<LeafProof> {
                let index = u64::from_be_bytes(self.take(8)?.try_into().ok()?);
                let kl = self.u8()? as usize;
                let key = self.take(kl)?.to_vec();
                let value: Word = self.take(32)?.try_into().ok()?;
                let pl = self.u8()? as usize;
                let mut path = Vec::with_capacity(pl);
                for _ in 0..pl {
                    path.push(Digest(self.take(32)?.try_into().ok()?));
                }
                Some(LeafProof {
                    index,
                    key,
                    value,
                    path,
                })
            }
            fn opt_leaf(&mut self) -> Option<Option<LeafProof>> {
                match self.u8()? {
                    0 => Some(None),
                    1 => Some(Some(self.leaf()?)),
                    _ => None,
                }
            }
        }
        let mut r = R(buf);
        let height = u64::from_be_bytes(r.take(8)?.try_into().ok()?);
        let count = u32::from_be_bytes(r.take(4)?.try_into().ok()?) as usize;
        let mut items = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            items.push(match r.u8()? {
                0x01 => KeyProof::Present(r.leaf()?),
                0x02 => {
                    let kl = r.u8()? as usize;
                    let key = r.take(kl)?.to_vec();
                    let left = r.opt_leaf()?;
                    let right = r.opt_leaf()?;
                    KeyProof::Absent { key, left, right }
                }
                _ => return None,
            });
        }
        if !r.0.is_empty() {
            return None;
        }
        Some(Self { height, items })
    }
}

/// Prove membership or absence of each key against the snapshot.
pub fn prove_membership(index: &SnapshotIndex, keys: &[Location]) -> BatchProof {
    let items = keys
        .iter()
        .map(|loc| {
            let k = loc.encode();
            match index.keys.binary_search(&k) {
                Ok(i) => KeyProof::Present(index.leaf(i)),
                Err(p) => KeyProof::Absent {
                    key: k,
                    left: (p > 0).then(|| index.leaf(p - 1)),
                    right: (p < index.keys.len()).then(|| index.leaf(p)),
                },
            }
        })
        .collect();
    BatchProof {
        height: index.height,
        items,
    }
}

fn leaf_root(p: &LeafProof, leaf_count: u64) -> Option<Digest> {
    if p.index >= leaf_count {
        return None;
    }
    let mut acc = leaf_hash(&p.key, &p.value);
    let mut idx = p.index;
    let mut width = leaf_count;
    let mut path = p.path.iter();
    while width > 1 {
        let sib = idx ^ 1;
        if sib < width {
            let s = path.next()?;
            acc = if idx % 2 == 0 { node_hash(&acc, s) } else { node_hash(s, &acc) };
        }
        idx /= 2;
        width = width.div_ceil(2);
    }
    path.next().is_none().then_some(acc)
}

/// Check `proof` answers exactly `keys` (in order) against `root`.
pub fn verify_membership(root: &IndexRoot, keys: &[Location], proof: &BatchProof) -> bool {
    if proof.height != root.height || proof.items.len() != keys.len() {
        return false;
    }
    let check_leaf = |p: &LeafProof| leaf_root(p, root.leaf_count) == Some(root.tree_root);
    for (loc, item) in keys.iter().zip(&proof.items) {
        let k = loc.encode();
        let ok = match item {
            KeyProof::Present(p) => p.key == k && check_leaf(p),
            KeyProof::Absent { key, left, right } => {
                if *key != k {
                    return false;
                }
                let left_ok = match left {
                    Some(l) => l.key < k && check_leaf(l),
                    None => true,
                };
                let right_ok = match right {
                    Some(r) => r.key > k && check_leaf(r),
                    None => true,
                };
                let adjacent = match (left, right) {
                    (Some(l), Some(r)) => r.index == l.index + 1,
                    (None, Some(r)) => r.index == 0,
                    (Some(l), None) => l.index + 1 == root.leaf_count,
                    (None, None) => root.leaf_count == 0,
                };
                left_ok && right_ok && adjacent
            }
        };
        if !ok {
            return false;
        }
    }
    true
}
