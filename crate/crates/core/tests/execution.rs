mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tipcut_core::executor::{exec_block_parallel, exec_block_scheduled, SeededSchedule};
use tipcut_core::state_machine::exec_block_sequential;
use tipcut_core::tx_codec::Transaction;
use tipcut_core::types::{Address, U256};

/// Balance-and-nonce ledger for plain transfers, kept apart from the crate's
/// state machine.
fn ledger_oracle(
    balances: &mut BTreeMap<Address, U256>,
    nonces: &mut BTreeMap<Address, u64>,
    txs: &[Transaction],
) {
    for tx in txs {
        let n = nonces.entry(tx.sender).or_default();
        if *n != tx.nonce {
            continue;
        }
        *n += 1;
        let to = tx.to.unwrap();
        let from_bal = balances.get(&tx.sender).copied().unwrap_or_default();
        if from_bal < tx.value {
            continue;
        }
        if to == tx.sender {
            continue;
        }
        let to_bal = balances.get(&to).copied().unwrap_or_default();
        let Some(credited) = to_bal.checked_add(tx.value) else {
            continue;
        };
        balances.insert(tx.sender, from_bal - tx.value);
        balances.insert(to, credited);
    }
}

fn transfers(rng: &mut ChaCha8Rng, accounts: u64, nonces: &mut [u64], len: usize) -> Vec<Transaction> {
    (0..len)
        .map(|_| {
            let s = rng.gen_range(0..accounts);
            let nonce = nonces[s as usize];
            if !rng.gen_ratio(1, 20) {
                nonces[s as usize] += 1;
            }
            Transaction {
                chain_id: 1,
                sender: common::account(s),
                to: Some(common::account(rng.gen_range(0..accounts + 2))),
                value: U256::from(rng.gen_range(0..400_000u64)),
                nonce,
                ..Default::default()
            }
        })
        .collect()
}

#[test]
fn transfers_match_independent_ledger() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let accounts = 12;
    let mut state = common::funded(accounts, 1_000_000);
    let mut balances: BTreeMap<Address, U256> =
        (0..accounts).map(|i| (common::account(i), U256::from(1_000_000u64))).collect();
    let mut ledger_nonces = BTreeMap::new();
    let mut nonces = vec![0; accounts as usize];
    for _ in 0..40 {
        let txs = transfers(&mut rng, accounts, &mut nonces, 60);
        let out = exec_block_parallel(&state, &txs, 4, 4);
        ledger_oracle(&mut balances, &mut ledger_nonces, &txs);
        for (a, b) in &balances {
            assert_eq!(out.state.balance(a), *b);
        }
        for (a, n) in &ledger_nonces {
            assert_eq!(out.state.nonce(a), *n);
        }
        assert_eq!(out.state.total_balance(), U256::from(accounts * 1_000_000));
        state = out.state;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parallel_equals_sequential(
        seed in any::<u64>(),
        len in 0usize..120,
        density in 0.0f64..=1.0,
        workers in 1usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let accounts = 16;
        let state = common::funded(accounts, 50_000);
        let mut nonces = vec![0; accounts as usize];
        let txs = common::random_block(&mut rng, accounts, &mut nonces, len, density);
        let (want, receipts) = exec_block_sequential(&state, &txs);
        let got = exec_block_parallel(&state, &txs, workers, 4);
        prop_assert_eq!(got.state.commitment(), want.commitment());
        prop_assert_eq!(&got.receipts, &receipts);
        let scheduled = exec_block_scheduled(&state, &txs, workers, 4, &mut SeededSchedule::new(seed));
        prop_assert_eq!(scheduled.state.commitment(), want.commitment());
        prop_assert_eq!(scheduled.receipts, receipts);
        prop_assert!(scheduled.stats.executions >= txs.len() as u64);
    }

    #[test]
    fn failed_receipts_write_only_the_nonce(seed in any::<u64>(), len in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = common::funded(8, 2_000);
        let mut nonces = vec![0; 8];
        let txs = common::random_block(&mut rng, 8, &mut nonces, len, 0.5);
        let (_, receipts) = exec_block_sequential(&state, &txs);
        for r in receipts.iter().filter(|r| !r.is_success()) {
            prop_assert!(r.writes.len() <= 1);
        }
    }
}
