//! Flat, length-prefixed transaction encoding.
//!
//! Byte layout, in order:
//!
//! | field              | width                                        |
//! |--------------------|----------------------------------------------|
//! | tx_type            | 1                                            |
//! | chain_id           | 8, big-endian                                |
//! | sender             | 20                                           |
//! | to_marker          | 1 (`0x00` creation, `0x01` address follows)  |
//! | to                 | 20, only when marker is `0x01`               |
//! | value              | 1-byte length L <= 32, then L bytes, minimal |
//! | nonce              | 8, big-endian                                |
//! | gas_limit          | 8, big-endian                                |
//! | gas_price          | 1-byte length L <= 32, then L bytes, minimal |
//! | signature          | 65                                           |
//! | access_list_count  | 2, big-endian                                |
//! | per entry: address | 20                                           |
//! | per entry: keys    | 2-byte count, then 32 bytes each             |
//! | input              | all remaining bytes, no prefix               |
//!
//! Minimal means no leading zero byte; zero is encoded as `L = 0`. The rule
//! makes every decodable payload canonical, so `encode(decode(b)) == b`.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::crypto::{self, Digest};
use crate::types::{parse_u256, Address, U256};

pub const CREATION_MARKER: u8 = 0x00;
pub const ADDRESS_MARKER: u8 = 0x01;
pub const SIGNATURE_LEN: usize = 65;

/// Shortest possible encoding: creation, zero value and gas price, empty
/// access list, empty input.
pub const MIN_ENCODED_LEN: usize = 1 + 8 + 20 + 1 + 1 + 8 + 8 + 1 + SIGNATURE_LEN + 2;

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AccessListEntry {
    pub address: Address,
    pub storage_keys: Vec<[u8; 32]>,
}

#[derive(Clone, PartialEq, Eq)]
pub struct Transaction {
    pub tx_type: u8,
    pub chain_id: u64,
    pub sender: Address,
    /// `None` means contract creation.
    pub to: Option<Address>,
    pub value: U256,
    pub nonce: u64,
    pub gas_limit: u64,
    pub gas_price: U256,
    pub signature: [u8; SIGNATURE_LEN],
    pub access_list: Vec<AccessListEntry>,
    pub input: Vec<u8>,
}

impl Default for Transaction {
    fn default() -> Self {
        Self {
            tx_type: 0,
            chain_id: 0,
            sender: Address::default(),
            to: None,
            value: U256::zero(),
            nonce: 0,
            gas_limit: 0,
            gas_price: U256::zero(),
            signature: [0u8; SIGNATURE_LEN],
            access_list: Vec::new(),
            input: Vec::new(),
        }
    }
}

impl fmt::Debug for Transaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transaction")
            .field("tx_type", &self.tx_type)
            .field("chain_id", &self.chain_id)
            .field("sender", &self.sender)
            .field("to", &self.to)
            .field("value", &self.value)
            .field("nonce", &self.nonce)
            .field("access_list", &self.access_list.len())
            .field("input_len", &self.input.len())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("access list has {0} entries, limit is 65535")]
    TooManyEntries(usize),
    #[error("access list entry {entry} has {count} storage keys, limit is 65535")]
    TooManyKeys { entry: usize, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeErrorKind {
    Truncated { needed: usize },
    NonMinimalInteger,
    IntegerTooWide(u8),
    BadToMarker(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("decode error at byte offset {offset} ({field}): {kind}")]
pub struct DecodeError {
    pub offset: usize,
    pub field: &'static str,
    pub kind: DecodeErrorKind,
}

impl fmt::Display for DecodeErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeErrorKind::Truncated { needed } => {
                write!(f, "payload truncated, {needed} more byte(s) needed")
            }
            DecodeErrorKind::NonMinimalInteger => f.write_str("non-minimal integer encoding"),
            DecodeErrorKind::IntegerTooWide(l) => write!(f, "integer length {l} exceeds 32"),
            DecodeErrorKind::BadToMarker(m) => write!(f, "invalid to-marker 0x{m:02x}"),
        }
    }
}

fn put_uint(out: &mut Vec<u8>, v: &U256) {
    let mut buf = [0u8; 32];
    v.to_big_endian(&mut buf);
    let skip = buf.iter().take_while(|b| **b == 0).count();
    out.push((32 - skip) as u8);
    out.extend_from_slice(&buf[skip..]);
}

/// Canonical encoding. Fails only when a count does not fit its 2-byte
/// prefix.
pub fn encode_transaction(tx: &Transaction) -> Result<Vec<u8>, EncodeError> {
    if tx.access_list.len() > u16::MAX as usize {
        return Err(EncodeError::TooManyEntries(tx.access_list.len()));
    }
    let keys: usize = tx.access_list.iter().map(|e| 22 + 32 * e.storage_keys.len()).sum();
    let mut out = Vec::with_capacity(MIN_ENCODED_LEN + 20 + 64 + keys + tx.input.len());
    out.push(tx.tx_type);
    out.extend_from_slice(&tx.chain_id.to_be_bytes());
    out.extend_from_slice(&tx.sender.0);
    match &tx.to {
        Some(to) => {
            out.push(ADDRESS_MARKER);
            out.extend_from_slice(&to.0);
        }
        None => out.push(CREATION_MARKER),
    }
    put_uint(&mut out, &tx.value);
    out.extend_from_slice(&tx.nonce.to_be_bytes());
    out.extend_from_slice(&tx.gas_limit.to_be_bytes());
    put_uint(&mut out, &tx.gas_price);
    out.extend_from_slice(&tx.signature);
    out.extend_from_slice(&(tx.access_list.len() as u16).to_be_bytes());
    for (i, entry) in tx.access_list.iter().enumerate() {
        if entry.storage_keys.len() > u16::MAX as usize {
            return Err(EncodeError::TooManyKeys {
                entry: i,
                count: entry.storage_keys.len(),
            });
        }
        out.extend_from_slice(&entry.address.0);
        out.extend_from_slice(&(entry.storage_keys.len() as u16).to_be_bytes());
        for k in &entry.storage_keys {
            out.extend_from_slice(k);
        }
    }
    out.extend_from_slice(&tx.input);
    Ok(out)
}

/// Forward-only cursor. Each byte is handed out at most once.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    spans: Option<&'a mut Vec<Range<usize>>>,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], DecodeError> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(DecodeError {
                offset: self.pos,
                field,
                kind: DecodeErrorKind::Truncated {
                    needed: n - remaining,
                },
            });
        }
        let start = self.pos;
        self.pos += n;
        if let Some(spans) = self.spans.as_deref_mut() {
            spans.push(start..self.pos);
        }
        Ok(&self.buf[start..self.pos])
    }

    fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N, field)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.array(field)?))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.array(field)?))
    }

    fn uint(&mut self, field: &'static str) -> Result<U256, DecodeError> {
        let at = self.pos;
        let len = self.u8(field)?;
        if len > 32 {
            return Err(DecodeError {
                offset: at,
                field,
                kind: DecodeErrorKind::IntegerTooWide(len),
            });
        }
        let bytes = self.take(len as usize, field)?;
        if bytes.first() == Some(&0) {
            return Err(DecodeError {
                offset: at + 1,
                field,
                kind: DecodeErrorKind::NonMinimalInteger,
            });
        }
        Ok(U256::from_big_endian(bytes))
    }

    fn rest(&mut self) -> &'a [u8] {
        let n = self.buf.len() - self.pos;
        self.take(n, "input").expect("remaining bytes always available")
    }
}

fn decode_with(mut r: Reader<'_>) -> Result<Transaction, DecodeError> {
    let tx_type = r.u8("tx_type")?;
    let chain_id = r.u64("chain_id")?;
    let sender = Address(r.array("sender")?);
    let marker_at = r.pos;
    let to = match r.u8("to_marker")? {
        CREATION_MARKER => None,
        ADDRESS_MARKER => Some(Address(r.array("to")?)),
        other => {
            return Err(DecodeError {
                offset: marker_at,
                field: "to_marker",
                kind: DecodeErrorKind::BadToMarker(other),
            })
        }
    };
    let value = r.uint("value")?;
    let nonce = r.u64("nonce")?;
    let gas_limit = r.u64("gas_limit")?;
    let gas_price = r.uint("gas_price")?;
    let signature = r.array::<SIGNATURE_LEN>("signature")?;
    let entries = r.u16("access_list_count")? as usize;
    let mut access_list = Vec::with_capacity(entries.min(1024));
    for _ in 0..entries {
        let address = Address(r.array("access_list.address")?);
        let count = r.u16("access_list.key_count")? as usize;
        let mut storage_keys = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            storage_keys.push(r.array::<32>("access_list.key")?);
        }
        access_list.push(AccessListEntry {
            address,
            storage_keys,
        });
    }
    let input = r.rest().to_vec();
    Ok(Transaction {
        tx_type,
        chain_id,
        sender,
        to,
        value,
        nonce,
        gas_limit,
        gas_price,
        signature,
        access_list,
        input,
    })
}

/// Single forward pass over `payload`. Whatever follows the access list is
/// the input, possibly empty.
pub fn decode_transaction(payload: &[u8]) -> Result<Transaction, DecodeError> {
    decode_with(Reader {
        buf: payload,
        pos: 0,
        spans: None,
    })
}

/// Same as [`decode_transaction`], also recording every byte range the
/// decoder consumed, in order.
pub fn decode_transaction_traced(
    payload: &[u8],
    spans: &mut Vec<Range<usize>>,
) -> Result<Transaction, DecodeError> {
    decode_with(Reader {
        buf: payload,
        pos: 0,
        spans: Some(spans),
    })
}

/// Digest of the canonical encoding.
pub fn tx_digest(tx: &Transaction) -> Digest {
    crypto::digest(&encode_transaction(tx).expect("transaction within encodable limits"))
}

/// Digest of the canonical encoding with the signature zeroed: the message
/// a client authenticates.
pub fn signing_digest(tx: &Transaction) -> Digest {
    let mut unsigned = tx.clone();
    unsigned.signature = [0u8; SIGNATURE_LEN];
    tx_digest(&unsigned)
}

/// Human-editable field table used by the CLI and the shipped test vectors.
/// Numbers are decimal strings so that full 64-bit values survive TOML.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxFields {
    pub tx_type: u8,
    pub chain_id: String,
    pub sender: Address,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<Address>,
    pub value: String,
    pub nonce: String,
    pub gas_limit: String,
    pub gas_price: String,
    pub signature: String,
    #[serde(default)]
    pub input: String,
    #[serde(default)]
    pub access_list: Vec<AccessListFields>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessListFields {
    pub address: Address,
    #[serde(default)]
    pub storage_keys: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
#[error("invalid field `{field}`: {reason}")]
pub struct FieldError {
    pub field: &'static str,
    pub reason: String,
}

fn field_err(field: &'static str, reason: impl Into<String>) -> FieldError {
    FieldError {
        field,
        reason: reason.into(),
    }
}

fn hex_bytes(field: &'static str, s: &str) -> Result<Vec<u8>, FieldError> {
    hex::decode(s.strip_prefix("0x").unwrap_or(s)).map_err(|e| field_err(field, e.to_string()))
}

impl From<&Transaction> for TxFields {
    fn from(tx: &Transaction) -> Self {
        TxFields {
            tx_type: tx.tx_type,
            chain_id: tx.chain_id.to_string(),
            sender: tx.sender,
            to: tx.to,
            value: tx.value.to_string(),
            nonce: tx.nonce.to_string(),
            gas_limit: tx.gas_limit.to_string(),
            gas_price: tx.gas_price.to_string(),
            signature: hex::encode(tx.signature),
            input: hex::encode(&tx.input),
            access_list: tx
                .access_list
                .iter()
                .map(|e| AccessListFields {
                    address: e.address,
                    storage_keys: e.storage_keys.iter().map(hex::encode).collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<&TxFields> for Transaction {
    type Error = FieldError;

    fn try_from(f: &TxFields) -> Result<Self, Self::Error> {
        let u64_field = |name: &'static str, s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| field_err(name, e.to_string()))
        };
        let signature: [u8; SIGNATURE_LEN] = hex_bytes("signature", &f.signature)?
            .try_into()
            .map_err(|v: Vec<u8>| field_err("signature", format!("{} bytes, expected 65", v.len())))?;
        let mut access_list = Vec::with_capacity(f.access_list.len());
        for e in &f.access_list {
            let mut keys = Vec::with_capacity(e.storage_keys.len());
            for k in &e.storage_keys {
                let key: [u8; 32] = hex_bytes("access_list.storage_keys", k)?
                    .try_into()
                    .map_err(|_| field_err("access_list.storage_keys", "expected 32 bytes"))?;
                keys.push(key);
            }
            access_list.push(AccessListEntry {
                address: e.address,
                storage_keys: keys,
            });
        }
        Ok(Transaction {
            tx_type: f.tx_type,
            chain_id: u64_field("chain_id", &f.chain_id)?,
            sender: f.sender,
            to: f.to,
            value: parse_u256(&f.value).ok_or_else(|| field_err("value", "not a 256-bit integer"))?,
            nonce: u64_field("nonce", &f.nonce)?,
            gas_limit: u64_field("gas_limit", &f.gas_limit)?,
            gas_price: parse_u256(&f.gas_price)
                .ok_or_else(|| field_err("gas_price", "not a 256-bit integer"))?,
            signature,
            access_list,
            input: hex_bytes("input", &f.input)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Transaction {
        Transaction {
            tx_type: 2,
            chain_id: 1329,
            sender: Address([0x11; 20]),
            to: Some(Address([0x22; 20])),
            value: U256::from(1_000_000u64),
            nonce: 7,
            gas_limit: 21_000,
            gas_price: U256::from(5u64),
            signature: [0xab; 65],
            access_list: vec![AccessListEntry {
                address: Address([0x33; 20]),
                storage_keys: vec![[0x44; 32], [0x55; 32]],
            }],
            input: vec![1, 2, 3],
        }
    }

    #[test]
    fn zero_value_is_single_length_byte() {
        let tx = Transaction {
            to: Some(Address([1; 20])),
            ..Default::default()
        };
        let enc = encode_transaction(&tx).unwrap();
        // value length byte sits right after the 20-byte `to`.
        assert_eq!(enc[50], 0x00);
        assert_eq!(enc[51..59], 0u64.to_be_bytes());
    }

    #[test]
    fn creation_marker_at_offset_29() {
        let tx = Transaction {
            tx_type: 1,
            chain_id: 5,
            sender: Address([9; 20]),
            to: None,
            value: U256::from(0x0102u64),
            ..Default::default()
        };
        let mut expected = vec![1u8];
        expected.extend_from_slice(&5u64.to_be_bytes());
        expected.extend_from_slice(&[9; 20]);
        expected.push(0x00); // creation marker, no address follows
        expected.extend_from_slice(&[2, 0x01, 0x02]); // value
        expected.extend_from_slice(&0u64.to_be_bytes()); // nonce
        expected.extend_from_slice(&0u64.to_be_bytes()); // gas_limit
        expected.push(0); // gas_price
        expected.extend_from_slice(&[0u8; 65]);
        expected.extend_from_slice(&[0, 0]);
        let enc = encode_transaction(&tx).unwrap();
        assert_eq!(enc[29], 0x00);
        assert_eq!(enc, expected);
        assert_eq!(decode_transaction(&enc).unwrap().to, None);
    }

    #[test]
    fn empty_input_when_payload_ends_after_access_list() {
        let mut tx = sample();
        tx.input.clear();
        let enc = encode_transaction(&tx).unwrap();
        let dec = decode_transaction(&enc).unwrap();
        assert!(dec.input.is_empty());
        assert_eq!(dec, tx);
    }

    #[test]
    fn one_entry_two_keys() {
        let tx = sample();
        let dec = decode_transaction(&encode_transaction(&tx).unwrap()).unwrap();
        assert_eq!(dec.access_list.len(), 1);
        assert_eq!(dec.access_list[0].storage_keys, vec![[0x44; 32], [0x55; 32]]);
    }

    #[test]
    fn truncated_mid_signature_names_offset() {
        let enc = encode_transaction(&sample()).unwrap();
        // signature starts after: 1+8+20+1+20 + 4 (value) + 8 + 8 + 2 (gas price)
        let sig_at = 1 + 8 + 20 + 1 + 20 + 4 + 8 + 8 + 2;
        let err = decode_transaction(&enc[..sig_at + 10]).unwrap_err();
        assert_eq!(err.offset, sig_at);
        assert_eq!(err.field, "signature");
        assert_eq!(err.kind, DecodeErrorKind::Truncated { needed: 55 });
        assert!(err.to_string().contains(&format!("offset {sig_at}")));
    }

    #[test]
    fn rejects_non_minimal_and_bad_marker() {
        let tx = sample();
        let mut enc = encode_transaction(&tx).unwrap();
        let mut bad_marker = enc.clone();
        bad_marker[29] = 0x02;
        let e = decode_transaction(&bad_marker).unwrap_err();
        assert_eq!((e.offset, e.kind), (29, DecodeErrorKind::BadToMarker(2)));

        // Rewrite value 1_000_000 (3 bytes) as 4 bytes with a leading zero.
        let value_at = 50;
        assert_eq!(enc[value_at], 3);
        enc[value_at] = 4;
        enc.insert(value_at + 1, 0);
        let e = decode_transaction(&enc).unwrap_err();
        assert_eq!(e.kind, DecodeErrorKind::NonMinimalInteger);

        let mut zero_as_one = encode_transaction(&Transaction::default()).unwrap();
        zero_as_one[30] = 1;
        zero_as_one.insert(31, 0);
        assert_eq!(
            decode_transaction(&zero_as_one).unwrap_err().kind,
            DecodeErrorKind::NonMinimalInteger
        );
    }

    #[test]
    fn too_wide_integer() {
        let mut enc = encode_transaction(&Transaction::default()).unwrap();
        enc[30] = 33;
        assert_eq!(
            decode_transaction(&enc).unwrap_err().kind,
            DecodeErrorKind::IntegerTooWide(33)
        );
    }

    #[test]
    fn max_width_values() {
        let tx = Transaction {
            value: U256::MAX,
            gas_price: U256::MAX,
            nonce: u64::MAX,
            chain_id: u64::MAX,
            ..Default::default()
        };
        let enc = encode_transaction(&tx).unwrap();
        assert_eq!(decode_transaction(&enc).unwrap(), tx);
    }

    #[test]
    fn decoder_reads_each_byte_once() {
        let enc = encode_transaction(&sample()).unwrap();
        let mut spans = Vec::new();
        decode_transaction_traced(&enc, &mut spans).unwrap();
        let mut next = 0;
        for s in &spans {
            assert_eq!(s.start, next, "spans must be contiguous and non-overlapping");
            next = s.end;
        }
        assert_eq!(next, enc.len());
    }

    #[test]
    fn digest_tracks_content() {
        let tx = sample();
        assert_eq!(tx_digest(&tx), tx_digest(&tx.clone()));
        let mut other = tx.clone();
        other.input[0] ^= 1;
        assert_ne!(tx_digest(&tx), tx_digest(&other));
        let rt = decode_transaction(&encode_transaction(&tx).unwrap()).unwrap();
        assert_eq!(tx_digest(&rt), tx_digest(&tx));
    }

    #[test]
    fn too_many_entries() {
        let tx = Transaction {
            access_list: vec![
                AccessListEntry {
                    address: Address::default(),
                    storage_keys: vec![],
                };
                70_000
            ],
            ..Default::default()
        };
        assert_eq!(encode_transaction(&tx), Err(EncodeError::TooManyEntries(70_000)));
    }

    #[test]
    fn fields_roundtrip() {
        let tx = sample();
        let fields = TxFields::from(&tx);
        let text = toml::to_string(&fields).unwrap();
        let back: TxFields = toml::from_str(&text).unwrap();
        assert_eq!(Transaction::try_from(&back).unwrap(), tx);
    }
}
