#![allow(dead_code)]

use rand::Rng;
use tipcut_core::state_machine::{encode_program, Op, WorldState};
use tipcut_core::tx_codec::{AccessListEntry, Transaction};
use tipcut_core::types::{u64_to_word, Address, U256};

pub fn account(i: u64) -> Address {
    Address::from_u64(0x1000 + i)
}

pub const CONTRACT: u64 = 0xC0DE;

pub fn funded(accounts: u64, balance: u64) -> WorldState {
    let mut s = WorldState::new();
    for i in 0..accounts {
        s.set_balance(account(i), U256::from(balance));
    }
    s
}

fn random_u256(rng: &mut impl Rng) -> U256 {
    let mut w = [0u8; 32];
    rng.fill_bytes(&mut w);
    match rng.gen_range(0..=256u32) {
        0 => U256::zero(),
        256 => U256::from_big_endian(&w),
        bits => U256::from_big_endian(&w) >> (256 - bits),
    }
}

/// Arbitrary well-formed transaction, not necessarily executable.
pub fn random_tx(rng: &mut impl Rng) -> Transaction {
    let mut t = Transaction {
        tx_type: rng.gen(),
        chain_id: rng.gen(),
        sender: Address(rng.gen()),
        to: rng.gen_bool(0.8).then(|| Address(rng.gen())),
        value: random_u256(rng),
        nonce: rng.gen(),
        gas_limit: rng.gen(),
        gas_price: random_u256(rng),
        ..Default::default()
    };
    rng.fill_bytes(&mut t.signature);
    let entries = [0, 0, 1, 2, 5][rng.gen_range(0..5)];
    t.access_list = (0..entries)
        .map(|_| AccessListEntry {
            address: Address(rng.gen()),
            storage_keys: (0..rng.gen_range(0..4)).map(|_| rng.gen()).collect(),
        })
        .collect();
    let len = [0, 1, 7, 64, 300][rng.gen_range(0..5)];
    t.input = (0..len).map(|_| rng.gen()).collect();
    t
}

/// Executable block over `funded(accounts, ..)`: `density` is the chance a
/// transaction touches shared state (hot contract slots or a shared sender).
pub fn random_block(
    rng: &mut impl Rng,
    accounts: u64,
    nonces: &mut [u64],
    len: usize,
    density: f64,
) -> Vec<Transaction> {
    let mut txs = Vec::with_capacity(len);
    for i in 0..len {
        let hot = rng.gen_bool(density);
        let s = if hot {
            rng.gen_range(0..accounts.min(4))
        } else {
            (i as u64 * 7 + rng.gen_range(0..accounts)) % accounts
        };
        let sender = account(s);
        let mut nonce = nonces[s as usize];
        if rng.gen_ratio(1, 50) {
            nonce += 1;
        } else {
            nonces[s as usize] += 1;
        }
        let mut tx = Transaction {
            chain_id: 1,
            sender,
            nonce,
            gas_limit: 100_000,
            gas_price: U256::one(),
            ..Default::default()
        };
        match rng.gen_range(0..4) {
            0 | 1 => {
                tx.to = Some(if hot {
                    account(rng.gen_range(0..4))
                } else {
                    Address(rng.gen())
                });
                tx.value = U256::from(if rng.gen_ratio(1, 40) {
                    u64::MAX
                } else {
                    rng.gen_range(0..1000)
                });
            }
            2 => {
                let keys = if hot { 2 } else { 1 << 20 };
                tx.to = Some(Address::from_u64(CONTRACT));
                tx.input = encode_program(&[
                    Op::SLoadAdd {
                        key: u64_to_word(rng.gen_range(0..keys)),
                        delta: rng.gen_range(1..100),
                        result: u64_to_word(rng.gen_range(0..keys)),
                    },
                    Op::SStore {
                        key: u64_to_word(rng.gen_range(0..keys)),
                        value: u64_to_word(rng.gen()),
                    },
                ]);
            }
            _ => {
                tx.to = Some(Address::from_u64(CONTRACT));
                tx.input = encode_program(&[Op::Transfer {
                    to: account(rng.gen_range(0..accounts)),
                    amount: U256::from(rng.gen_range(0..500u64)),
                }]);
                if rng.gen_ratio(1, 30) {
                    tx.input.push(0xEE);
                }
            }
        }
        txs.push(tx);
    }
    txs
}
