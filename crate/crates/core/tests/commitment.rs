mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};
use tipcut_core::commitment::{
    commit_of_state, prove_membership, verify_membership, BatchProof, SnapshotIndex,
};
use tipcut_core::executor::exec_block_parallel;
use tipcut_core::state_machine::{Location, WorldState};
use tipcut_core::storage::{Durability, FlatStore};
use tipcut_core::types::{Address, Word, U256};

/// Wrapping sum of SHA-256 over `kind ‖ address ‖ [key] ‖ value`, spelled out
/// by hand.
fn reference_commitment(state: &WorldState) -> Word {
    let mut sum = U256::zero();
    for (loc, value) in state.entries() {
        let mut h = Sha256::new();
        match loc {
            Location::Balance(a) => {
                h.update([1u8]);
                h.update(a.0);
            }
            Location::Nonce(a) => {
                h.update([2u8]);
                h.update(a.0);
            }
            Location::Slot(a, k) => {
                h.update([3u8]);
                h.update(a.0);
                h.update(k);
            }
        }
        h.update(value);
        let d: [u8; 32] = h.finalize().into();
        sum = sum.overflowing_add(U256::from_big_endian(&d)).0;
    }
    let mut out = [0u8; 32];
    sum.to_big_endian(&mut out);
    out
}

fn random_location(rng: &mut ChaCha8Rng, addrs: u64) -> Location {
    let a = Address::from_u64(rng.gen_range(0..addrs));
    match rng.gen_range(0..3) {
        0 => Location::Balance(a),
        1 => Location::Nonce(a),
        _ => {
            let mut k = [0u8; 32];
            k[31] = rng.gen_range(0..16);
            Location::Slot(a, k)
        }
    }
}

fn random_state(rng: &mut ChaCha8Rng, entries: usize) -> WorldState {
    let mut s = WorldState::new();
    for _ in 0..entries {
        s.set(random_location(rng, 64), rng.gen());
    }
    s
}

#[test]
fn incremental_equals_recompute_across_executed_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let accounts = 24;
    let mut state = common::funded(accounts, 100_000);
    let (mut store, _wal) = FlatStore::in_memory(Durability::Manual);
    let genesis = state.entries().map(|(l, v)| (*l, *v)).collect();
    store.apply_block(0, &genesis).unwrap();
    let mut nonces = vec![0; accounts as usize];
    for h in 1..=120 {
        let txs = common::random_block(&mut rng, accounts, &mut nonces, 30, 0.4);
        let out = exec_block_parallel(&state, &txs, 3, 4);
        let mut writes = std::collections::BTreeMap::new();
        for r in &out.receipts {
            writes.extend(r.writes.iter().map(|(l, v)| (*l, *v)));
        }
        store.apply_block(h, &writes).unwrap();
        state = out.state;
        let full = commit_of_state(&state);
        assert_eq!(state.commitment().value, full.value, "height {h}");
        assert_eq!(store.commitment().value, full.value, "height {h}");
        assert_eq!(full.value, reference_commitment(&state), "height {h}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn maintained_commitment_tracks_every_write(seed in any::<u64>(), writes in 0usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = WorldState::new();
        for _ in 0..writes {
            let loc = random_location(&mut rng, 8);
            let v: Word = if rng.gen_ratio(1, 4) { [0; 32] } else { rng.gen() };
            s.set(loc, v);
        }
        prop_assert_eq!(s.commitment().value, reference_commitment(&s));
        prop_assert_eq!(commit_of_state(&s).value, reference_commitment(&s));
    }

    #[test]
    fn proofs_answer_exactly_the_state(seed in any::<u64>(), entries in 0usize..200, asked in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = random_state(&mut rng, entries);
        let index = SnapshotIndex::build(&state);
        let root = index.root();
        let keys: Vec<Location> = (0..asked).map(|_| random_location(&mut rng, 80)).collect();
        let proof = prove_membership(&index, &keys);
        prop_assert!(verify_membership(&root, &keys, &proof));
        for (loc, claim) in proof.claims() {
            prop_assert_eq!(claim, state.contains(&loc).then(|| state.get(&loc)));
        }
        let bytes = proof.encode();
        let decoded = BatchProof::decode(&bytes);
        prop_assert_eq!(decoded.as_ref(), Some(&proof));
        let i = rng.gen_range(0..bytes.len());
        let mut tampered = bytes.clone();
        tampered[i] ^= 1 << rng.gen_range(0..8);
        if let Some(p) = BatchProof::decode(&tampered) {
            prop_assert!(!verify_membership(&root, &keys, &p), "byte {} accepted", i);
        }
    }
}
