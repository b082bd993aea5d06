//! Deterministic toy execution semantics.
//!
//! State is a flat map from [`Location`] to a 32-byte word. Absent entries
//! read as zero and writing zero deletes the entry, so equal logical states
//! always have equal maps (and equal commitments).
//!
//! A transaction first checks and bumps the sender nonce, then moves
//! `value` from the sender to the target (`to`, or a derived address for
//! creations), then runs the payload program against the target's storage.
//! Any failure after the nonce check discards everything except the nonce
//! bump.
//!
//! Payload program: empty input, or a first byte of `0`, is a pure
//! transfer. Otherwise byte 0 is the op count and ops follow back to back:
//!
//! | opcode | name      | operands                                   |
//! |--------|-----------|--------------------------------------------|
//! | `0x01` | SSTORE    | key(32) value(32)                          |
//! | `0x02` | SLOAD_ADD | key(32) delta(8, BE) result_key(32)        |
//! | `0x03` | TRANSFER  | recipient(20) amount(32, BE)               |
//!
//! SLOAD_ADD adds the low 8 bytes of `key` plus `delta` to a per-transaction
//! accumulator (wrapping u64) and stores the accumulator at `result_key`.
//! TRANSFER debits the transaction sender.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::commitment::{self, StateCommitment};
use crate::crypto::{Digest, Hasher};
use crate::tx_codec::{tx_digest, Transaction};
use crate::types::{
    parse_u256, u256_to_word, u64_to_word, word_low_u64, word_to_u256, Address, Word, U256,
    ZERO_WORD,
};

pub const MAX_OPS: usize = 255;

/// A single addressable piece of state. Ordered by kind, then address,
/// then slot key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Location {
    Balance(Address),
    Nonce(Address),
    Slot(Address, Word),
}

impl Location {
    pub fn kind_tag(&self) -> u8 {
        match self {
            Location::Balance(_) => 0x01,
            Location::Nonce(_) => 0x02,
            Location::Slot(..) => 0x03,
        }
    }

    pub fn address(&self) -> &Address {
        match self {
            Location::Balance(a) | Location::Nonce(a) | Location::Slot(a, _) => a,
        }
    }

    /// `kind(1) ‖ address(20) ‖ [key(32)]`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(53);
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.kind_tag());
        out.extend_from_slice(&self.address().0);
        if let Location::Slot(_, key) = self {
            out.extend_from_slice(key);
        }
    }

    /// Decode from the front of `buf`, returning the location and the number
    /// of bytes consumed.
    pub fn decode(buf: &[u8]) -> Option<(Location, usize)> {
        let tag = *buf.first()?;
        let addr = Address(buf.get(1..21)?.try_into().ok()?);
        match tag {
            0x01 => Some((Location::Balance(addr), 21)),
            0x02 => Some((Location::Nonce(addr), 21)),
            0x03 => {
                let key: Word = buf.get(21..53)?.try_into().ok()?;
                Some((Location::Slot(addr, key), 53))
            }
            _ => None,
        }
    }
}

impl fmt::Debug for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Balance(a) => write!(f, "Balance({a})"),
            Location::Nonce(a) => write!(f, "Nonce({a})"),
            Location::Slot(a, k) => write!(f, "Slot({a}, {})", hex::encode(k)),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Read access to a state snapshot.
pub trait StateView {
    fn read(&self, loc: &Location) -> Word;
}

/// Flat account and storage state with an incrementally maintained
/// commitment.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct WorldState {
    entries: BTreeMap<Location, Word>,
    commitment: U256,
    height: u64,
}

impl fmt::Debug for WorldState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WorldState")
            .field("entries", &self.entries.len())
            .field("height", &self.height)
            .field("commitment", &hex::encode(u256_to_word(self.commitment)))
            .finish()
    }
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn set_height(&mut self, height: u64) {
        self.height = height;
    }

    pub fn get(&self, loc: &Location) -> Word {
        self.entries.get(loc).copied().unwrap_or(ZERO_WORD)
    }

    pub fn contains(&self, loc: &Location) -> bool {
        self.entries.contains_key(loc)
    }

    /// Write one entry, keeping the commitment in step. Zero deletes.
    pub fn set(&mut self, loc: Location, value: Word) {
        let old = self.entries.get(&loc).map(|v| (loc, *v));
        let new = (value != ZERO_WORD).then_some((loc, value));
        self.commitment = commitment::update_raw(self.commitment, old.as_ref(), new.as_ref());
        match new {
            Some(_) => {
                self.entries.insert(loc, value);
            }
            None => {
                self.entries.remove(&loc);
            }
        }
    }

    pub fn apply_writes(&mut self, writes: &BTreeMap<Location, Word>) {
        for (loc, value) in writes {
            self.set(*loc, *value);
        }
    }

    pub fn balance(&self, addr: &Address) -> U256 {
        word_to_u256(&self.get(&Location::Balance(*addr)))
    }

    pub fn nonce(&self, addr: &Address) -> u64 {
        word_low_u64(&self.get(&Location::Nonce(*addr)))
    }

    pub fn slot(&self, addr: &Address, key: &Word) -> Word {
        self.get(&Location::Slot(*addr, *key))
    }

    pub fn set_balance(&mut self, addr: Address, amount: U256) {
        self.set(Location::Balance(addr), u256_to_word(amount));
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Location, &Word)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn commitment(&self) -> StateCommitment {
        StateCommitment {
            value: u256_to_word(self.commitment),
            height: self.height,
        }
    }

    pub fn total_balance(&self) -> U256 {
        self.entries
            .iter()
            .filter(|(l, _)| matches!(l, Location::Balance(_)))
            .fold(U256::zero(), |acc, (_, v)| acc + word_to_u256(v))
    }

    /// Execute one transaction in place.
    pub fn apply_tx(&mut self, tx: &Transaction) -> Receipt {
        let receipt = execute(self, tx);
        self.apply_writes(&receipt.writes);
        receipt
    }
}

impl StateView for WorldState {
    fn read(&self, loc: &Location) -> Word {
        self.get(loc)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailReason {
    BadNonce { expected: u64, got: u64 },
    InsufficientBalance,
    BalanceOverflow,
    MalformedProgram,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxStatus {
    Success,
    Failed(FailReason),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Receipt {
    pub tx_digest: Digest,
    pub status: TxStatus,
    /// Locations read from the pre-state (reads of the transaction's own
    /// earlier writes are not listed).
    pub reads: BTreeSet<Location>,
    pub writes: BTreeMap<Location, Word>,
}

impl Receipt {
    pub fn is_success(&self) -> bool {
        self.status == TxStatus::Success
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    SStore { key: Word, value: Word },
    SLoadAdd { key: Word, delta: u64, result: Word },
    Transfer { to: Address, amount: U256 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("unknown opcode 0x{0:02x} at byte {1}")]
    UnknownOpcode(u8, usize),
    #[error("truncated operand at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing byte(s) after the last op")]
    Trailing(usize),
    #[error("empty op list followed by {0} byte(s)")]
    EmptyWithTrailing(usize),
}

pub fn parse_program(input: &[u8]) -> Result<Vec<Op>, ProgramError> {
    let Some((&count, mut rest)) = input.split_first() else {
        return Ok(Vec::new());
    };
    if count == 0 {
        return if rest.is_empty() {
            Ok(Vec::new())
        } else {
            Err(ProgramError::EmptyWithTrailing(rest.len()))
        };
    }
    let mut ops = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = input.len() - rest.len();
        let (&code, tail) = rest.split_first().ok_or(ProgramError::Truncated(at))?;
        let need = match code {
            0x01 => 64,
            0x02 => 72,
            0x03 => 52,
            other => return Err(ProgramError::UnknownOpcode(other, at)),
        };
        if tail.len() < need {
            return Err(ProgramError::Truncated(at + 1));
        }
        let (body, next) = tail.split_at(need);
        let word = |r: std::ops::Range<usize>| -> Word { body[r].try_into().expect("32 bytes") };
        ops.push(match code {
            0x01 => Op::SStore {
                key: word(0..32),
                value: word(32..64),
            },
            0x02 => Op::SLoadAdd {
                key: word(0..32),
                delta: u64::from_be_bytes(body[32..40].try_into().expect("8 bytes")),
                result: word(40..72),
            },
            _ => Op::Transfer {
                to: Address(body[..20].try_into().expect("20 bytes")),
                amount: U256::from_big_endian(&body[20..52]),
            },
        });
        rest = next;
    }
    if !rest.is_empty() {
        return Err(ProgramError::Trailing(rest.len()));
    }
    Ok(ops)
}

/// Inverse of [`parse_program`]. Panics if `ops` holds more than
/// [`MAX_OPS`] entries.
pub fn encode_program(ops: &[Op]) -> Vec<u8> {
    assert!(ops.len() <= MAX_OPS, "at most {MAX_OPS} ops per program");
    let mut out = vec![ops.len() as u8];
    for op in ops {
        match op {
            Op::SStore { key, value } => {
                out.push(0x01);
                out.extend_from_slice(key);
                out.extend_from_slice(value);
            }
            Op::SLoadAdd { key, delta, result } => {
                out.push(0x02);
                out.extend_from_slice(key);
                out.extend_from_slice(&delta.to_be_bytes());
                out.extend_from_slice(result);
            }
            Op::Transfer { to, amount } => {
                out.push(0x03);
                out.extend_from_slice(&to.0);
                out.extend_from_slice(&u256_to_word(*amount));
            }
        }
    }
    out
}

/// Address assigned to a contract created by `sender` at `nonce`.
pub fn creation_address(sender: &Address, nonce: u64) -> Address {
    let mut h = Hasher::with_domain("tipcut/create");
    h.update(&sender.0).update(&nonce.to_be_bytes());
    let d = h.finish();
    Address(d.0[12..].try_into().expect("20 bytes"))
}

struct Ctx<'a, V: ?Sized> {
    view: &'a V,
    reads: BTreeSet<Location>,
    writes: BTreeMap<Location, Word>,
}

impl<V: StateView + ?Sized> Ctx<'_, V> {
    fn get(&mut self, loc: Location) -> Word {
        if let Some(w) = self.writes.get(&loc) {
            return *w;
        }
        self.reads.insert(loc);
        self.view.read(&loc)
    }

    fn put(&mut self, loc: Location, value: Word) {
        self.writes.insert(loc, value);
    }

    fn transfer(&mut self, from: Address, to: Address, amount: U256) -> Result<(), FailReason> {
        let from_bal = word_to_u256(&self.get(Location::Balance(from)));
        if from_bal < amount {
            return Err(FailReason::InsufficientBalance);
        }
        if from == to || amount.is_zero() {
            return Ok(());
        }
        let to_bal = word_to_u256(&self.get(Location::Balance(to)));
        let credited = to_bal
            .checked_add(amount)
            .ok_or(FailReason::BalanceOverflow)?;
        self.put(Location::Balance(from), u256_to_word(from_bal - amount));
        self.put(Location::Balance(to), u256_to_word(credited));
        Ok(())
    }
}

fn run_body<V: StateView + ?Sized>(
    ctx: &mut Ctx<'_, V>,
    tx: &Transaction,
    target: Address,
) -> Result<(), FailReason> {
    let ops = parse_program(&tx.input).map_err(|_| FailReason::MalformedProgram)?;
    ctx.transfer(tx.sender, target, tx.value)?;
    let mut acc = 0u64;
    for op in ops {
        match op {
            Op::SStore { key, value } => ctx.put(Location::Slot(target, key), value),
            Op::SLoadAdd { key, delta, result } => {
                let v = word_low_u64(&ctx.get(Location::Slot(target, key)));
                acc = acc.wrapping_add(v).wrapping_add(delta);
                ctx.put(Location::Slot(target, result), u64_to_word(acc));
            }
            Op::Transfer { to, amount } => ctx.transfer(tx.sender, to, amount)?,
        }
    }
    Ok(())
}

/// Execute `tx` against `view` without mutating anything. The receipt's
/// write set is what a caller applies to obtain the post-state.
pub fn execute<V: StateView + ?Sized>(view: &V, tx: &Transaction) -> Receipt {
    let mut ctx = Ctx {
        view,
        reads: BTreeSet::new(),
        writes: BTreeMap::new(),
    };
    let digest = tx_digest(tx);
    let nonce_loc = Location::Nonce(tx.sender);
    let expected = word_low_u64(&ctx.get(nonce_loc));
    if expected != tx.nonce {
        return Receipt {
            tx_digest: digest,
            status: TxStatus::Failed(FailReason::BadNonce {
                expected,
                got: tx.nonce,
            }),
            reads: ctx.reads,
            writes: BTreeMap::new(),
        };
    }
    let bumped = u64_to_word(expected.wrapping_add(1));
    ctx.put(nonce_loc, bumped);
    let target = tx
        .to
        .unwrap_or_else(|| creation_address(&tx.sender, tx.nonce));
    let status = match run_body(&mut ctx, tx, target) {
        Ok(()) => TxStatus::Success,
        Err(reason) => {
            ctx.writes.clear();
            ctx.writes.insert(nonce_loc, bumped);
            TxStatus::Failed(reason)
        }
    };
    Receipt {
        tx_digest: digest,
        status,
        reads: ctx.reads,
        writes: ctx.writes,
    }
}

/// Pure form: returns the successor state alongside the receipt.
pub fn exec_transaction(state: &WorldState, tx: &Transaction) -> (WorldState, Receipt) {
    let mut next = state.clone();
    let receipt = next.apply_tx(tx);
    (next, receipt)
}

/// Left fold of [`execute`] over the block. Reference result for the
/// parallel executor.
pub fn exec_block_sequential(state: &WorldState, txs: &[Transaction]) -> (WorldState, Vec<Receipt>) {
    let mut next = state.clone();
    let receipts = txs.iter().map(|tx| next.apply_tx(tx)).collect();
    (next, receipts)
}

/// Genesis allocation file.
///
/// ```toml
/// [[accounts]]
/// address = "0x00000000000000000000000000000000000000aa"
/// balance = "1000000"
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genesis {
    #[serde(default)]
    pub accounts: Vec<GenesisAccount>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenesisAccount {
    pub address: Address,
    /// Decimal or `0x` hex.
    pub balance: String,
}

#[derive(Debug, thiserror::Error)]
pub enum GenesisError {
    #[error("genesis parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("account {0}: balance `{1}` is not a 256-bit integer")]
    Balance(Address, String),
    #[error("account {0} listed twice")]
    Duplicate(Address),
}

impl Genesis {
    pub fn from_toml(text: &str) -> Result<Self, GenesisError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_state(&self) -> Result<WorldState, GenesisError> {
        let mut state = WorldState::new();
        let mut seen = BTreeSet::new();
        for acct in &self.accounts {
            if !seen.insert(acct.address) {
                return Err(GenesisError::Duplicate(acct.address));
            }
            let bal = parse_u256(&acct.balance)
                .ok_or_else(|| GenesisError::Balance(acct.address, acct.balance.clone()))?;
            state.set_balance(acct.address, bal);
        }
        Ok(state)
    }
}
