mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use tipcut_core::tx_codec::{
    decode_transaction, decode_transaction_traced, encode_transaction, DecodeErrorKind,
    Transaction, TxFields,
};
use tipcut_core::types::U256;

#[derive(Deserialize)]
struct VectorFile {
    vector: Vec<Vector>,
}

#[derive(Deserialize)]
struct Vector {
    name: String,
    hex: String,
    fields: TxFields,
}

fn vectors() -> Vec<Vector> {
    let text = include_str!("../testdata/tx_vectors.toml");
    toml::from_str::<VectorFile>(text).unwrap().vector
}

fn minimal_uint(v: &U256) -> Vec<u8> {
    let mut b = [0u8; 32];
    v.to_big_endian(&mut b);
    let first = b.iter().position(|x| *x != 0).unwrap_or(32);
    let mut out = vec![(32 - first) as u8];
    out.extend_from_slice(&b[first..]);
    out
}

/// Written from the byte layout table, independent of the crate encoder.
fn reference_encode(tx: &Transaction) -> Vec<u8> {
    let mut out = vec![tx.tx_type];
    out.extend(tx.chain_id.to_be_bytes());
    out.extend(tx.sender.0);
    match tx.to {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend(a.0);
        }
    }
    out.extend(minimal_uint(&tx.value));
    out.extend(tx.nonce.to_be_bytes());
    out.extend(tx.gas_limit.to_be_bytes());
    out.extend(minimal_uint(&tx.gas_price));
    out.extend(tx.signature);
    out.extend((tx.access_list.len() as u16).to_be_bytes());
    for e in &tx.access_list {
        out.extend(e.address.0);
        out.extend((e.storage_keys.len() as u16).to_be_bytes());
        for k in &e.storage_keys {
            out.extend(k);
        }
    }
    out.extend(&tx.input);
    out
}

#[test]
fn shipped_vectors_match_field_tables() {
    let vs = vectors();
    assert!(vs.len() >= 50);
    for v in &vs {
        let bytes = hex::decode(&v.hex).unwrap();
        let from_fields = Transaction::try_from(&v.fields).unwrap();
        assert_eq!(encode_transaction(&from_fields).unwrap(), bytes, "{}", v.name);
        assert_eq!(reference_encode(&from_fields), bytes, "{}", v.name);
        let decoded = decode_transaction(&bytes).unwrap();
        assert_eq!(TxFields::from(&decoded), v.fields, "{}", v.name);
    }
}

#[test]
fn truncation_sweep_over_vectors() {
    for v in vectors() {
        let bytes = hex::decode(&v.hex).unwrap();
        let full = decode_transaction(&bytes).unwrap();
        let mut spans = Vec::new();
        decode_transaction_traced(&bytes, &mut spans).unwrap();
        let header = bytes.len() - full.input.len();
        for cut in 0..bytes.len() {
            let got = decode_transaction(&bytes[..cut]);
            if cut >= header {
                let tx = got.unwrap_or_else(|e| panic!("{} cut {cut}: {e}", v.name));
                assert_eq!(tx.input, full.input[..cut - header]);
                assert_eq!(Transaction { input: vec![], ..tx }, Transaction { input: vec![], ..full.clone() });
                continue;
            }
            let err = got.expect_err("header prefix must not decode");
            let span = spans.iter().find(|s| s.end > cut).unwrap();
            assert_eq!(err.offset, span.start, "{} cut {cut}", v.name);
            assert_eq!(
                err.kind,
                DecodeErrorKind::Truncated { needed: span.end - cut },
                "{} cut {cut}",
                v.name
            );
        }
    }
}

#[test]
fn layout_offsets_by_hand() {
    let v = &vectors()[1];
    assert_eq!(v.name, "create-empty-input");
    let bytes = hex::decode(&v.hex).unwrap();
    assert_eq!(bytes[29], 0x00);
    assert_eq!(&bytes[30..33], &[2, 0x03, 0xe8]);
    assert_eq!(bytes.len(), 1 + 8 + 20 + 1 + 3 + 8 + 8 + 2 + 65 + 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn encode_then_decode_is_identity(seed in any::<u64>()) {
        let tx = common::random_tx(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = encode_transaction(&tx).unwrap();
        prop_assert_eq!(&bytes, &reference_encode(&tx));
        prop_assert_eq!(decode_transaction(&bytes).unwrap(), tx);
    }

    #[test]
    fn decodable_bytes_are_canonical(seed in any::<u64>(), flips in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bytes = encode_transaction(&common::random_tx(&mut rng)).unwrap();
        for _ in 0..flips {
            let i = rng.gen_range(0..bytes.len());
            bytes[i] = rng.gen();
        }
        if let Ok(tx) = decode_transaction(&bytes) {
            prop_assert_eq!(encode_transaction(&tx).unwrap(), bytes);
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
        if let Ok(tx) = decode_transaction(&bytes) {
            prop_assert_eq!(encode_transaction(&tx).unwrap(), bytes);
        }
    }
}
