//! Flat key-value store with a write-ahead log.
//!
//! Every block's writes go to the WAL as one record per location followed by
//! a block marker, then into the in-memory hot map. WAL bytes reach the
//! backing sink asynchronously on a background thread; [`FlatStore::flush`]
//! is the barrier that waits for them. Replay applies a block only once its
//! marker is read, so a crash never exposes half a block.
//!
//! Frame: `len(4 BE) ‖ body ‖ crc32(body)(4 BE)`.
//!
//! Body:
//!
//! | type | layout                                                       |
//! |------|--------------------------------------------------------------|
//! | 0x01 | seq(8) height(8) location old_flag [old(32)] new_flag [new(32)] |
//! | 0x02 | seq(8) height(8) write_count(4)                                |
//!
//! Entries untouched for a configurable number of blocks can be demoted to
//! an append-only cold file; reads fall through to it transparently.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::commitment::{self, StateCommitment};
use crate::state_machine::{Location, WorldState};
use crate::types::{u256_to_word, Word, U256, ZERO_WORD};

const REC_WRITE: u8 = 0x01;
const REC_BLOCK: u8 = 0x02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WalRecord {
    Write {
        seq: u64,
        height: u64,
        key: Location,
        old: Option<Word>,
        new: Option<Word>,
    },
    Block {
        seq: u64,
        height: u64,
        writes: u32,
    },
}

impl WalRecord {
    pub fn seq(&self) -> u64 {
        match self {
            WalRecord::Write { seq, .. } | WalRecord::Block { seq, .. } => *seq,
        }
    }

    pub fn height(&self) -> u64 {
        match self {
            WalRecord::Write { height, .. } | WalRecord::Block { height, .. } => *height,
        }
    }

    fn encode_body(&self, out: &mut Vec<u8>) {
        match self {
            WalRecord::Write {
                seq,
                height,
                key,
                old,
                new,
            } => {
                out.push(REC_WRITE);
                out.extend_from_slice(&seq.to_be_bytes());
                out.extend_from_slice(&height.to_be_bytes());
                key.encode_into(out);
                for v in [old, new] {
                    match v {
                        Some(w) => {
                            out.push(1);
                            out.extend_from_slice(w);
                        }
                        None => out.push(0),
                    }
                }
            }
            WalRecord::Block {
                seq,
                height,
                writes,
            } => {
                out.push(REC_BLOCK);
                out.extend_from_slice(&seq.to_be_bytes());
                out.extend_from_slice(&height.to_be_bytes());
                out.extend_from_slice(&writes.to_be_bytes());
            }
        }
    }

    /// Append one framed record.
    pub fn encode_frame(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&[0; 4]);
        self.encode_body(out);
        let body_len = out.len() - start - 4;
        out[start..start + 4].copy_from_slice(&(body_len as u32).to_be_bytes());
        let crc = crc32fast::hash(&out[start + 4..]);
        out.extend_from_slice(&crc.to_be_bytes());
    }

    fn decode_body(body: &[u8]) -> Option<Self> {
        let (&ty, rest) = body.split_first()?;
        let seq = u64::from_be_bytes(rest.get(..8)?.try_into().ok()?);
        let height = u64::from_be_bytes(rest.get(8..16)?.try_into().ok()?);
        let rest = &rest[16..];
        match ty {
            REC_WRITE => {
                let (key, used) = Location::decode(rest)?;
                let mut rest = &rest[used..];
                let mut opt = || -> Option<Option<Word>> {
                    let (&flag, tail) = rest.split_first()?;
                    match flag {
                        0 => {
                            rest = tail;
                            Some(None)
                        }
                        1 => {
                            let w: Word = tail.get(..32)?.try_into().ok()?;
                            rest = &tail[32..];
                            Some(Some(w))
                        }
                        _ => None,
                    }
                };
                let old = opt()?;
                let new = opt()?;
                rest.is_empty().then_some(WalRecord::Write {
                    seq,
                    height,
                    key,
                    old,
                    new,
                })
            }
            REC_BLOCK if rest.len() == 4 => Some(WalRecord::Block {
                seq,
                height,
                writes: u32::from_be_bytes(rest.try_into().ok()?),
            }),
            _ => None,
        }
    }
}

impl fmt::Display for WalRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let word = |w: &Option<Word>| match w {
            Some(w) => format!("0x{}", hex::encode(w)),
            None => "-".to_string(),
        };
        match self {
            WalRecord::Write {
                seq,
                height,
                key,
                old,
                new,
            } => write!(
                f,
                "seq={seq} height={height} write key={key} old={} new={}",
                word(old),
                word(new)
            ),
            WalRecord::Block {
                seq,
                height,
                writes,
            } => write!(f, "seq={seq} height={height} block writes={writes}"),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WalError {
    #[error("checksum mismatch in record at offset {offset} followed by more data")]
    Corrupt { offset: usize },
    #[error("malformed record body at offset {offset}")]
    Malformed { offset: usize },
    #[error("sequence number {got} at offset {offset} does not follow {prev}")]
    Sequence { offset: usize, prev: u64, got: u64 },
    #[error("record at offset {offset} has old value inconsistent with the log")]
    Chain { offset: usize },
    #[error("block marker at offset {offset} for height {got}, expected {expected}")]
    Height {
        offset: usize,
        expected: u64,
        got: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TailState {
    Clean,
    /// Incomplete frame or bad checksum on the final frame, starting at
    /// `offset`.
    Torn { offset: usize, reason: &'static str },
}

/// Frame-level parse of a WAL image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WalScan {
    pub records: Vec<(usize, WalRecord)>,
    pub tail: TailState,
    /// Byte length of the valid prefix.
    pub valid_len: usize,
}

pub fn scan_wal(bytes: &[u8]) -> Result<WalScan, WalError> {
    let mut records = Vec::new();
    let mut off = 0;
    let mut prev_seq: Option<u64> = None;
    let torn = |offset, reason| TailState::Torn { offset, reason };
    let tail = loop {
        if off == bytes.len() {
            break TailState::Clean;
        }
        if bytes.len() - off < 4 {
            break torn(off, "incomplete length prefix");
        }
        let len = u32::from_be_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        let end = off + 4 + len + 4;
        if end > bytes.len() {
            break torn(off, "incomplete frame");
        }
        let body = &bytes[off + 4..off + 4 + len];
        let crc = u32::from_be_bytes(bytes[end - 4..end].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            if end == bytes.len() {
                break torn(off, "checksum mismatch on final record");
            }
            return Err(WalError::Corrupt { offset: off });
        }
        let rec = WalRecord::decode_body(body).ok_or(WalError::Malformed { offset: off })?;
        if let Some(p) = prev_seq {
            if rec.seq() <= p {
                return Err(WalError::Sequence {
                    offset: off,
                    prev: p,
                    got: rec.seq(),
                });
            }
        }
        prev_seq = Some(rec.seq());
        records.push((off, rec));
        off = end;
    };
    Ok(WalScan {
        records,
        tail,
        valid_len: off,
    })
}

/// Human-readable listing for tooling: records grouped under the block
/// marker that closes them, then `torn-tail at offset N` if the final frame
/// is incomplete. An empty log lists nothing.
pub fn dump_wal(bytes: &[u8]) -> Result<String, WalError> {
    let scan = scan_wal(bytes)?;
    let mut out = String::new();
    let mut pending = Vec::new();
    for (off, rec) in &scan.records {
        pending.push(format!("  @{off:08} {rec}\n"));
        if let WalRecord::Block { height, writes, .. } = rec {
            out.push_str(&format!("height {height} ({writes} writes)\n"));
            out.extend(pending.drain(..));
        }
    }
    if !pending.is_empty() {
        out.push_str("unterminated\n");
        out.extend(pending);
    }
    if let TailState::Torn { offset, .. } = scan.tail {
        out.push_str(&format!("torn-tail at offset {offset}\n"));
    }
    Ok(out)
}

/// Result of replaying a WAL image.
#[derive(Clone, Debug)]
pub struct Replayed {
    pub entries: BTreeMap<Location, Word>,
    /// Highest block whose marker was read.
    pub height: Option<u64>,
    pub last_seq: Option<u64>,
    pub blocks: u64,
    /// Records after the last block marker (an unfinished block).
    pub dropped_records: usize,
    pub tail: TailState,
    /// Byte length of the prefix ending at the last block marker.
    pub block_aligned_len: usize,
}

impl Replayed {
    pub fn to_world_state(&self) -> WorldState {
        let mut s = WorldState::new();
        for (l, v) in &self.entries {
            s.set(*l, *v);
        }
        s.set_height(self.height.unwrap_or(0));
        s
    }
}

pub fn replay(bytes: &[u8]) -> Result<Replayed, WalError> {
    let scan = scan_wal(bytes)?;
    let mut entries: BTreeMap<Location, Word> = BTreeMap::new();
    let mut pending: Vec<(Location, Option<Word>)> = Vec::new();
    let mut height = None;
    let mut blocks = 0;
    let mut last_seq = None;
    let mut aligned = 0;
    for (i, (off, rec)) in scan.records.iter().enumerate() {
        match rec {
            WalRecord::Write { key, old, new, .. } => {
                // Old values must chain through the log.
                let current = pending
                    .iter()
                    .rev()
                    .find(|(k, _)| k == key)
                    .map(|(_, v)| *v)
                    .unwrap_or_else(|| entries.get(key).copied());
                if current != *old {
                    return Err(WalError::Chain { offset: *off });
                }
                pending.push((*key, *new));
            }
            WalRecord::Block {
                height: h, writes, ..
            } => {
                let expected = height.map_or(0, |p: u64| p + 1);
                if *h != expected || *writes as usize != pending.len() {
                    return Err(WalError::Height {
                        offset: *off,
                        expected,
                        got: *h,
                    });
                }
                for (k, v) in pending.drain(..) {
                    match v {
                        Some(w) => {
                            entries.insert(k, w);
                        }
                        None => {
                            entries.remove(&k);
                        }
                    }
                }
                height = Some(*h);
                blocks += 1;
                last_seq = Some(rec.seq());
                aligned = scan
                    .records
                    .get(i + 1)
                    .map_or(scan.valid_len, |(next, _)| *next);
            }
        }
    }
    Ok(Replayed {
        entries,
        height,
        last_seq,
        blocks,
        dropped_records: pending.len(),
        tail: scan.tail,
        block_aligned_len: aligned,
    })
}

/// Durable destination for WAL bytes.
pub trait WalSink: Send + 'static {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn sync(&mut self) -> io::Result<()>;
}

/// Shared in-memory sink. Clones see the same bytes, which lets tests
/// inspect exactly what reached "disk".
#[derive(Clone, Default)]
pub struct MemoryWal {
    bytes: Arc<Mutex<Vec<u8>>>,
    fail_after: Arc<Mutex<Option<usize>>>,
}

impl MemoryWal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.bytes.lock().expect("wal poisoned").clone()
    }

    /// Make appends fail once the sink holds `limit` bytes.
    pub fn fail_after(&self, limit: usize) {
        *self.fail_after.lock().expect("wal poisoned") = Some(limit);
    }
}

impl WalSink for MemoryWal {
    fn append(&mut self, data: &[u8]) -> io::Result<()> {
        let mut bytes = self.bytes.lock().expect("wal poisoned");
        if let Some(limit) = *self.fail_after.lock().expect("wal poisoned") {
            if bytes.len() + data.len() > limit {
                return Err(io::Error::other("injected write failure"));
            }
        }
        bytes.extend_from_slice(data);
        Ok(())
    }

    fn sync(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub struct FileWal(File);

impl FileWal {
    pub fn open(path: &Path) -> io::Result<Self> {
        Ok(Self(OpenOptions::new().create(true).append(true).open(path)?))
    }
}

impl WalSink for FileWal {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.write_all(bytes)
    }

    fn sync(&mut self) -> io::Result<()> {
        self.0.sync_data()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Durability {
    /// Each block's bytes are handed to the background writer immediately.
    #[default]
    Background,
    /// Bytes stay in the store until [`FlatStore::flush`]. Used to stage
    /// crashes precisely.
    Manual,
}

enum IoMsg {
    Data(Vec<u8>, u64),
    Barrier(Sender<io::Result<()>>),
}

struct IoThread {
    tx: Option<Sender<IoMsg>>,
    handle: Option<JoinHandle<()>>,
    durable: Arc<AtomicU64>,
    failed: Arc<AtomicBool>,
}

impl IoThread {
    fn spawn(mut sink: Box<dyn WalSink>) -> Self {
        let (tx, rx): (Sender<IoMsg>, Receiver<IoMsg>) = mpsc::channel();
        let durable = Arc::new(AtomicU64::new(0));
        let failed = Arc::new(AtomicBool::new(false));
        let (d, f) = (durable.clone(), failed.clone());
        let handle = std::thread::spawn(move || {
            let mut err: Option<io::Error> = None;
            for msg in rx {
                match msg {
                    IoMsg::Data(bytes, through) => {
                        if err.is_some() {
                            continue;
                        }
                        match sink.append(&bytes) {
                            Ok(()) => d.store(through, Ordering::Release),
                            Err(e) => {
                                f.store(true, Ordering::Release);
                                err = Some(e);
                            }
                        }
                    }
                    IoMsg::Barrier(ack) => {
                        let res = match &err {
                            Some(e) => Err(io::Error::new(e.kind(), e.to_string())),
                            None => sink.sync(),
                        };
                        if res.is_err() {
                            f.store(true, Ordering::Release);
                        }
                        let _ = ack.send(res);
                    }
                }
            }
        });
        Self {
            tx: Some(tx),
            handle: Some(handle),
            durable,
            failed,
        }
    }

    fn send(&self, msg: IoMsg) {
        if let Some(tx) = &self.tx {
            let _ = tx.send(msg);
        }
    }
}

impl Drop for IoThread {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

enum ColdBacking {
    Memory(Vec<u8>),
    File(File),
}

impl ColdBacking {
    fn append(&mut self, data: &[u8]) -> io::Result<u64> {
        match self {
            ColdBacking::Memory(v) => {
                let off = v.len() as u64;
                v.extend_from_slice(data);
                Ok(off)
            }
            ColdBacking::File(f) => {
                let off = f.seek(SeekFrom::End(0))?;
                f.write_all(data)?;
                Ok(off)
            }
        }
    }

    fn read_at(&mut self, off: u64, len: usize) -> io::Result<Vec<u8>> {
        match self {
            ColdBacking::Memory(v) => v
                .get(off as usize..off as usize + len)
                .map(<[u8]>::to_vec)
                .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "cold read")),
            ColdBacking::File(f) => {
                f.seek(SeekFrom::Start(off))?;
                let mut buf = vec![0; len];
                f.read_exact(&mut buf)?;
                Ok(buf)
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("block height {got} does not follow {expected}")]
    HeightGap { expected: u64, got: u64 },
    #[error("store is read-only after an I/O failure")]
    ReadOnly,
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("wal: {0}")]
    Wal(#[from] WalError),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub wal_records: u64,
    pub wal_bytes: u64,
    pub cold_reads: u64,
    pub demoted: u64,
    pub cold_entries: usize,
}

/// Hot map plus cold file, backed by a WAL.
pub struct FlatStore {
    hot: BTreeMap<Location, (Word, u64)>,
    cold_index: BTreeMap<Location, u64>,
    cold: Mutex<ColdBacking>,
    commitment: U256,
    next_height: u64,
    next_seq: u64,
    durability: Durability,
    pending: Vec<u8>,
    pending_through: u64,
    io: IoThread,
    read_only: bool,
    cold_reads: AtomicU64,
    stats: StoreStats,
}

const COLD_RECORD: usize = 53 + 32;

impl FlatStore {
    /// Fresh store over `sink`; the next block expected is height 0.
    pub fn new(sink: Box<dyn WalSink>, durability: Durability) -> Self {
        Self {
            hot: BTreeMap::new(),
            cold_index: BTreeMap::new(),
            cold: Mutex::new(ColdBacking::Memory(Vec::new())),
            commitment: U256::zero(),
            next_height: 0,
            next_seq: 0,
            durability,
            pending: Vec::new(),
            pending_through: 0,
            io: IoThread::spawn(sink),
            read_only: false,
            cold_reads: AtomicU64::new(0),
            stats: StoreStats::default(),
        }
    }

    pub fn in_memory(durability: Durability) -> (Self, MemoryWal) {
        let wal = MemoryWal::new();
        (Self::new(Box::new(wal.clone()), durability), wal)
    }

    /// Open (or create) a store in `dir`: `wal.log` is replayed, a torn tail
    /// or unfinished block is cut off, and appends resume after it. The
    /// cold file `cold.dat` is rebuilt empty.
    pub fn open_dir(dir: &Path, durability: Durability) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        let wal_path: PathBuf = dir.join("wal.log");
        let bytes = std::fs::read(&wal_path).unwrap_or_default();
        let rep = replay(&bytes)?;
        if rep.block_aligned_len != bytes.len() {
            let f = OpenOptions::new().write(true).open(&wal_path)?;
            f.set_len(rep.block_aligned_len as u64)?;
            f.sync_data()?;
        }
        let cold = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(true)
            .open(dir.join("cold.dat"))?;
        let mut store = Self::new(Box::new(FileWal::open(&wal_path)?), durability);
        store.cold = Mutex::new(ColdBacking::File(cold));
        store.restore(&rep);
        Ok(store)
    }

    /// Rebuild from a replay over a new sink that already holds the
    /// replayed prefix.
    pub fn from_replay(rep: &Replayed, sink: Box<dyn WalSink>, durability: Durability) -> Self {
        let mut store = Self::new(sink, durability);
        store.restore(rep);
        store
    }

    fn restore(&mut self, rep: &Replayed) {
        let h = rep.height.unwrap_or(0);
        for (l, v) in &rep.entries {
            self.hot.insert(*l, (*v, h));
            self.commitment = commitment::update_raw(self.commitment, None, Some(&(*l, *v)));
        }
        self.next_height = rep.height.map_or(0, |h| h + 1);
        self.next_seq = rep.last_seq.map_or(0, |s| s + 1);
        self.pending_through = rep.height.unwrap_or(0);
        self.io.durable.store(self.pending_through, Ordering::Release);
    }

    /// Next height [`apply_block`](Self::apply_block) accepts.
    pub fn next_height(&self) -> u64 {
        self.next_height
    }

    /// Height of the last applied block, if any.
    pub fn height(&self) -> Option<u64> {
        self.next_height.checked_sub(1)
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only || self.io.failed.load(Ordering::Acquire)
    }

    pub fn commitment(&self) -> StateCommitment {
        StateCommitment {
            value: u256_to_word(self.commitment),
            height: self.height().unwrap_or(0),
        }
    }

    /// Append the block to the WAL and apply it to the hot map. Returns
    /// before the bytes are durable.
    pub fn apply_block(
        &mut self,
        height: u64,
        writes: &BTreeMap<Location, Word>,
    ) -> Result<(), StoreError> {
        if self.is_read_only() {
            self.read_only = true;
            return Err(StoreError::ReadOnly);
        }
        if height != self.next_height {
            return Err(StoreError::HeightGap {
                expected: self.next_height,
                got: height,
            });
        }
        let mut frames = Vec::new();
        let mut count = 0u32;
        for (loc, value) in writes {
            let old = self.get(loc);
            let new = (*value != ZERO_WORD).then_some(*value);
            WalRecord::Write {
                seq: self.next_seq,
                height,
                key: *loc,
                old,
                new,
            }
            .encode_frame(&mut frames);
            self.next_seq += 1;
            count += 1;

            self.commitment = commitment::update_raw(
                self.commitment,
                old.map(|v| (*loc, v)).as_ref(),
                new.map(|v| (*loc, v)).as_ref(),
            );
            self.cold_index.remove(loc);
            match new {
                Some(v) => {
                    self.hot.insert(*loc, (v, height));
                }
                None => {
                    self.hot.remove(loc);
                }
            }
        }
        WalRecord::Block {
            seq: self.next_seq,
            height,
            writes: count,
        }
        .encode_frame(&mut frames);
        self.next_seq += 1;
        self.next_height += 1;
        self.stats.wal_records += count as u64 + 1;
        self.stats.wal_bytes += frames.len() as u64;

        match self.durability {
            Durability::Background => self.io.send(IoMsg::Data(frames, height)),
            Durability::Manual => {
                self.pending.extend_from_slice(&frames);
                self.pending_through = height;
            }
        }
        Ok(())
    }

    /// Wait until everything applied so far reached the sink.
    pub fn flush(&mut self) -> Result<(), StoreError> {
        if !self.pending.is_empty() {
            let bytes = std::mem::take(&mut self.pending);
            self.io.send(IoMsg::Data(bytes, self.pending_through));
        }
        let (tx, rx) = mpsc::channel();
        self.io.send(IoMsg::Barrier(tx));
        let res = rx
            .recv()
            .unwrap_or_else(|_| Err(io::Error::other("wal writer gone")));
        if res.is_err() {
            self.read_only = true;
        }
        Ok(res?)
    }

    /// Highest block height known to have reached the sink.
    pub fn durable_height(&self) -> u64 {
        self.io.durable.load(Ordering::Acquire)
    }

    pub fn get(&self, key: &Location) -> Option<Word> {
        if let Some((v, _)) = self.hot.get(key) {
            return Some(*v);
        }
        let off = *self.cold_index.get(key)?;
        self.cold_reads.fetch_add(1, Ordering::Relaxed);
        let rec = self
            .cold
            .lock()
            .expect("cold tier poisoned")
            .read_at(off, COLD_RECORD)
            .ok()?;
        let (loc, _) = Location::decode(&rec)?;
        debug_assert_eq!(loc, *key);
        rec[53..85].try_into().ok()
    }

    /// Move entries not written for at least `min_age` blocks to the cold
    /// file. Returns how many moved.
    pub fn demote_cold(&mut self, min_age: u64) -> Result<usize, StoreError> {
        let now = self.height().unwrap_or(0);
        let stale: Vec<Location> = self
            .hot
            .iter()
            .filter(|(_, (_, touched))| now.saturating_sub(*touched) >= min_age)
            .map(|(l, _)| *l)
            .collect();
        let mut cold = self.cold.lock().expect("cold tier poisoned");
        for loc in &stale {
            let (value, _) = self.hot[loc];
            let mut rec = Vec::with_capacity(COLD_RECORD);
            rec.push(loc.kind_tag());
            rec.extend_from_slice(&loc.address().0);
            match loc {
                Location::Slot(_, k) => rec.extend_from_slice(k),
                _ => rec.extend_from_slice(&[0; 32]),
            }
            rec.extend_from_slice(&value);
            let off = cold.append(&rec)?;
            self.cold_index.insert(*loc, off);
            self.hot.remove(loc);
        }
        self.stats.demoted += stale.len() as u64;
        Ok(stale.len())
    }

    pub fn hot_len(&self) -> usize {
        self.hot.len()
    }

    pub fn cold_len(&self) -> usize {
        self.cold_index.len()
    }

    /// Hot and cold contents merged.
    pub fn entries(&self) -> BTreeMap<Location, Word> {
        let mut out: BTreeMap<Location, Word> =
            self.hot.iter().map(|(l, (v, _))| (*l, *v)).collect();
        for l in self.cold_index.keys() {
            if let Some(v) = self.get(l) {
                out.insert(*l, v);
            }
        }
        out
    }

    pub fn to_world_state(&self) -> WorldState {
        let mut s = WorldState::new();
        for (l, v) in self.entries() {
            s.set(l, v);
        }
        s.set_height(self.height().unwrap_or(0));
        s
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            cold_reads: self.cold_reads.load(Ordering::Relaxed),
            cold_entries: self.cold_index.len(),
            ..self.stats.clone()
        }
    }
}
