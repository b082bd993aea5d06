//! Seeded client workload. Sender `i` submits to lane `i mod n`, keeping
//! its nonces in order within one lane; duplicates go to the next lane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tipcut_core::crypto::{digest, Digest, KeyRegistry, ReplicaId};
use tipcut_core::state_machine::{encode_program, Op};
use tipcut_core::tx_codec::{encode_transaction, signing_digest, Transaction};
use tipcut_core::types::{u64_to_word, Address, U256};

use crate::scenario::{account, Scenario};

pub fn contract_address() -> Address {
    Address::from_u64(0xC0DE)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Submission {
    pub at_ms: u64,
    pub lane: ReplicaId,
    pub tx: Vec<u8>,
    /// True for the second copy of a duplicated transaction.
    pub duplicate: bool,
}

impl Submission {
    pub fn digest(&self) -> Digest {
        digest(&self.tx)
    }
}

/// All submissions of a run, ordered by time then lane.
pub fn generate(sc: &Scenario, reg: &KeyRegistry, seed: u64) -> Vec<Submission> {
    let w = &sc.workload;
    let n = sc.net.n;
    if w.rate_per_lane <= 0.0 {
        return vec![];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x776f_726b_6c6f_6164);
    let accounts = sc.genesis().map(|g| g.accounts.len() as u64).unwrap_or(0).max(1);
    let senders = w.senders.clamp(1, accounts);
    let accounts_list: Vec<Address> = match sc.genesis() {
        Ok(g) if sc.genesis.path.is_some() => g.accounts.iter().map(|a| a.address).collect(),
        _ => (0..accounts).map(account).collect(),
    };
    let mut nonces = vec![0u64; senders as usize];
    let end = w.duration_ms.unwrap_or(sc.run.duration_ms);
    let interval = 1000.0 / w.rate_per_lane;
    let total_weight = (w.mix.transfer + w.mix.contract + w.mix.create).max(1);
    let mut out = Vec::new();
    for lane in 0..n {
        let mine: Vec<u64> = (0..senders).filter(|s| (*s as usize) % n == lane).collect();
        if mine.is_empty() {
            continue;
        }
        let mut k = 0u64;
        loop {
            let jitter: f64 = rng.gen_range(0.0..interval.min(10.0));
            let at = (k as f64 * interval + jitter) as u64 + 1;
            if at >= end {
                break;
            }
            k += 1;
            let s = mine[rng.gen_range(0..mine.len())];
            let sender = accounts_list[s as usize];
            let nonce = nonces[s as usize];
            nonces[s as usize] += 1;
            let pick = rng.gen_range(0..total_weight);
            let mut tx = Transaction {
                chain_id: 1,
                sender,
                nonce,
                gas_limit: 100_000,
                gas_price: U256::from(1u64),
                ..Default::default()
            };
            if pick < w.mix.transfer {
                tx.to = Some(accounts_list[rng.gen_range(0..accounts_list.len())]);
                tx.value = U256::from(rng.gen_range(1u64..1000));
            } else if pick < w.mix.transfer + w.mix.contract {
                let hot = w.hot_keys.max(1);
                let key = u64_to_word(rng.gen_range(0..hot));
                let result = u64_to_word(rng.gen_range(0..hot));
                tx.to = Some(contract_address());
                tx.input = encode_program(&[Op::SLoadAdd {
                    key,
                    delta: rng.gen_range(1..100),
                    result,
                }]);
            } else {
                tx.input = encode_program(&[Op::SStore {
                    key: u64_to_word(1),
                    value: u64_to_word(rng.gen()),
                }]);
                tx.value = U256::from(rng.gen_range(0u64..10));
            }
            tx.signature = reg.client_sign(&sender.0, &signing_digest(&tx));
            let bytes = encode_transaction(&tx).expect("generated transaction encodes");
            let dup = rng.gen_bool(w.duplicate_fraction);
            out.push(Submission {
                at_ms: at,
                lane: ReplicaId(lane as u32),
                tx: bytes.clone(),
                duplicate: false,
            });
            if dup {
                out.push(Submission {
                    at_ms: at + 1,
                    lane: ReplicaId(((lane + 1) % n) as u32),
                    tx: bytes,
                    duplicate: true,
                });
            }
        }
    }
    out.sort_by_key(|s| (s.at_ms, s.lane, s.duplicate));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tipcut_core::tx_codec::decode_transaction;

    #[test]
    fn deterministic_and_well_formed() {
        let mut sc = Scenario::basic(4, 10);
        sc.run.duration_ms = 2000;
        sc.workload.duplicate_fraction = 0.1;
        let reg = KeyRegistry::generate(4, 1);
        let a = generate(&sc, &reg, 9);
        let b = generate(&sc, &reg, 9);
        assert_eq!(a, b);
        assert!(a.len() > 150);
        let dups = a.iter().filter(|s| s.duplicate).count();
        assert!(dups > 0);
        for s in &a {
            let tx = decode_transaction(&s.tx).unwrap();
            assert!(reg.client_verify(&tx.sender.0, &signing_digest(&tx), &tx.signature));
            if !s.duplicate {
                let sender_index = (0..64).find(|i| account(*i) == tx.sender).unwrap();
                assert_eq!(sender_index as usize % 4, s.lane.index());
            }
        }
    }
}
