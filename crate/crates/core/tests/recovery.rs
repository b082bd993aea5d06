use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tipcut_core::state_machine::{Location, WorldState};
use tipcut_core::storage::{replay, Durability, FlatStore, MemoryWal, WalSink};
use tipcut_core::types::{Address, Word};

fn random_blocks(rng: &mut ChaCha8Rng, blocks: usize) -> Vec<BTreeMap<Location, Word>> {
    (0..blocks)
        .map(|_| {
            (0..rng.gen_range(0..12))
                .map(|_| {
                    let a = Address::from_u64(rng.gen_range(0..10));
                    let loc = if rng.gen() {
                        Location::Balance(a)
                    } else {
                        Location::Slot(a, [rng.gen_range(0..4); 32])
                    };
                    let v: Word = if rng.gen_ratio(1, 5) { [0; 32] } else { rng.gen() };
                    (loc, v)
                })
                .collect()
        })
        .collect()
}

/// State after each prefix of blocks, built with a plain map.
fn oracle_states(blocks: &[BTreeMap<Location, Word>]) -> Vec<WorldState> {
    let mut s = WorldState::new();
    let mut out = vec![s.clone()];
    for (h, b) in blocks.iter().enumerate() {
        for (l, v) in b {
            s.set(*l, *v);
        }
        s.set_height(h as u64);
        out.push(s.clone());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn kill_replay_resume_matches_uninterrupted(seed in any::<u64>(), blocks in 1usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = random_blocks(&mut rng, blocks);
        let oracle = oracle_states(&plan);
        let (mut store, wal) = FlatStore::in_memory(Durability::Manual);
        let flushed_through = rng.gen_range(0..blocks);
        for (h, b) in plan.iter().enumerate() {
            store.apply_block(h as u64, b).unwrap();
            if h <= flushed_through && (rng.gen_ratio(1, 2) || h == flushed_through) {
                store.flush().unwrap();
            }
        }
        drop(store);
        let image = wal.bytes();
        let kill = rng.gen_range(0..=image.len());
        let rep = replay(&image[..kill]).unwrap();
        let recovered = rep.blocks as usize;
        prop_assert!(recovered <= flushed_through + 1);
        let got = rep.to_world_state();
        prop_assert_eq!(got.commitment().value, oracle[recovered].commitment().value);
        prop_assert_eq!(&rep.entries, &oracle[recovered].entries().map(|(l, v)| (*l, *v)).collect());

        let mut sink = MemoryWal::new();
        sink.append(&image[..rep.block_aligned_len]).unwrap();
        let mut resumed = FlatStore::from_replay(&rep, Box::new(sink.clone()), Durability::Manual);
        prop_assert_eq!(resumed.next_height() as usize, recovered);
        for (h, b) in plan.iter().enumerate().skip(recovered) {
            resumed.apply_block(h as u64, b).unwrap();
        }
        resumed.flush().unwrap();
        prop_assert_eq!(resumed.commitment().value, oracle[blocks].commitment().value);
        let again = replay(&sink.bytes()).unwrap();
        prop_assert_eq!(again.blocks as usize, blocks);
        prop_assert_eq!(again.to_world_state().commitment().value, oracle[blocks].commitment().value);
    }
}
