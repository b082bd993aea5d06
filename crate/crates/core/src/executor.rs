//! Optimistic parallel block execution.
//!
//! Every transaction runs against a versioned view: writes committed by
//! lower-indexed transactions, layered over the pre-block state. Results
//! commit strictly in index order. A result is rejected (and the
//! transaction re-executed) if any write committed after its execution began
//! touches its read or write set. Validation happens twice: right after
//! execution, so doomed results are retried early, and again at commit.
//!
//! If total aborts exceed `retry_budget × |txs|` the block is handed to
//! [`exec_block_sequential`].
//!
//! Two drivers share one engine: a thread pool ([`exec_block_parallel`]) and
//! a single-threaded virtual-worker mode ([`exec_block_scheduled`]) whose
//! interleaving is chosen by a [`Schedule`], for reproducing any ordering
//! from a seed or a script.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::state_machine::{
    exec_block_sequential, execute, Location, Receipt, StateView, WorldState,
};
use crate::tx_codec::Transaction;
use crate::types::Word;

pub const DEFAULT_RETRY_BUDGET: usize = 4;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ExecStats {
    pub txs: usize,
    pub executions: u64,
    pub aborts: u64,
    pub fallback: bool,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub state: WorldState,
    pub receipts: Vec<Receipt>,
    pub stats: ExecStats,
}

/// `(j, i)` with `j > i` whenever `W_i` meets `R_j ∪ W_j`.
pub fn dependency_edges(receipts: &[Receipt]) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for (i, ri) in receipts.iter().enumerate() {
        for (j, rj) in receipts.iter().enumerate().skip(i + 1) {
            let hit = ri
                .writes
                .keys()
                .any(|loc| rj.reads.contains(loc) || rj.writes.contains_key(loc));
            if hit {
                edges.insert((j, i));
            }
        }
    }
    edges
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Validation {
    Ok,
    /// Index of the committed writer that invalidated the result.
    Conflict { writer: usize },
}

/// Check a result that began at commit sequence `begin_seq` against the
/// commit log.
pub fn validate(
    receipt: &Receipt,
    begin_seq: usize,
    log: &[(usize, BTreeSet<Location>)],
) -> Validation {
    for (writer, locs) in log.iter().skip(begin_seq) {
        let touches = locs
            .iter()
            .any(|l| receipt.reads.contains(l) || receipt.writes.contains_key(l));
        if touches {
            return Validation::Conflict { writer: *writer };
        }
    }
    Validation::Ok
}

/// Committed writes over the immutable pre-block state.
pub struct VersionedView<'a> {
    base: &'a WorldState,
    committed: &'a RwLock<BTreeMap<Location, Word>>,
}

impl StateView for VersionedView<'_> {
    fn read(&self, loc: &Location) -> Word {
        let committed = self.committed.read().expect("committed map poisoned");
        match committed.get(loc) {
            Some(v) => *v,
            None => self.base.get(loc),
        }
    }
}

#[derive(Clone, Debug)]
enum SlotStatus {
    Pending,
    Executing,
    Executed { receipt: Receipt, begin_seq: usize },
    Committed,
}

#[derive(Clone, Debug)]
struct TxSlot {
    incarnation: u32,
    status: SlotStatus,
}

struct Engine {
    slots: Vec<TxSlot>,
    pending: BTreeSet<usize>,
    next_commit: usize,
    log: Vec<(usize, BTreeSet<Location>)>,
    /// Latest log sequence that wrote each location.
    last_write: BTreeMap<Location, usize>,
    receipts: Vec<Option<Receipt>>,
    executions: u64,
    aborts: u64,
    abort_limit: u64,
    gave_up: bool,
}

impl Engine {
    fn new(n: usize, retry_budget: usize) -> Self {
        Self {
            slots: vec![
                TxSlot {
                    incarnation: 0,
                    status: SlotStatus::Pending
                };
                n
            ],
            pending: (0..n).collect(),
            next_commit: 0,
            log: Vec::new(),
            last_write: BTreeMap::new(),
            receipts: vec![None; n],
            executions: 0,
            aborts: 0,
            abort_limit: (retry_budget.max(1) * n) as u64,
            gave_up: false,
        }
    }

    fn done(&self) -> bool {
        self.gave_up || self.next_commit == self.slots.len()
    }

    /// Claim the lowest pending transaction.
    fn claim(&mut self) -> Option<(usize, usize)> {
        if self.gave_up {
            return None;
        }
        let idx = self.pending.pop_first()?;
        self.slots[idx].status = SlotStatus::Executing;
        self.executions += 1;
        Some((idx, self.log.len()))
    }

    fn abort(&mut self, idx: usize) {
        let slot = &mut self.slots[idx];
        slot.incarnation += 1;
        slot.status = SlotStatus::Pending;
        self.pending.insert(idx);
        self.aborts += 1;
        if self.aborts > self.abort_limit {
            self.gave_up = true;
        }
    }

    /// Same verdict as [`validate`] against the log, via the write index.
    fn still_valid(&self, receipt: &Receipt, begin_seq: usize) -> bool {
        let fresh = |l: &Location| self.last_write.get(l).is_some_and(|s| *s >= begin_seq);
        !(receipt.reads.iter().any(fresh) || receipt.writes.keys().any(fresh))
    }

    /// Record an execution result, validating it eagerly.
    fn finish(&mut self, idx: usize, begin_seq: usize, receipt: Receipt) {
        if !self.still_valid(&receipt, begin_seq) {
            self.abort(idx);
            return;
        }
        self.slots[idx].status = SlotStatus::Executed { receipt, begin_seq };
    }

    /// Commit the next transaction if it has a result. Returns whether
    /// anything changed.
    fn commit_next(&mut self, committed: &RwLock<BTreeMap<Location, Word>>) -> bool {
        let idx = self.next_commit;
        if self.gave_up || idx >= self.slots.len() {
            return false;
        }
        let (receipt, begin_seq) = match &self.slots[idx].status {
            SlotStatus::Executed { receipt, begin_seq } => (receipt.clone(), *begin_seq),
            _ => return false,
        };
        if !self.still_valid(&receipt, begin_seq) {
            self.abort(idx);
            return true;
        }
        {
            let mut map = committed.write().expect("committed map poisoned");
            for (l, v) in &receipt.writes {
                map.insert(*l, *v);
            }
        }
        let seq = self.log.len();
        for l in receipt.writes.keys() {
            self.last_write.insert(*l, seq);
        }
        self.log.push((idx, receipt.writes.keys().copied().collect()));
        self.slots[idx].status = SlotStatus::Committed;
        self.receipts[idx] = Some(receipt);
        self.next_commit += 1;
        true
    }

    fn into_output(self, base: &WorldState, txs: &[Transaction], started: Instant) -> BlockOutput {
        let mut stats = ExecStats {
            txs: txs.len(),
            executions: self.executions,
            aborts: self.aborts,
            fallback: self.gave_up,
            wall_time: Duration::ZERO,
        };
        let (state, receipts) = if self.gave_up {
            stats.executions += txs.len() as u64;
            exec_block_sequential(base, txs)
        } else {
            let receipts: Vec<Receipt> = self
                .receipts
                .into_iter()
                .map(|r| r.expect("every slot committed"))
                .collect();
            let mut state = base.clone();
            for r in &receipts {
                state.apply_writes(&r.writes);
            }
            (state, receipts)
        };
        stats.wall_time = started.elapsed();
        BlockOutput {
            state,
            receipts,
            stats,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecConfig {
    pub workers: usize,
    pub retry_budget: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            retry_budget: DEFAULT_RETRY_BUDGET,
        }
    }
}

/// Execute `txs` on `workers` OS threads. The result always equals
/// [`exec_block_sequential`]; only the stats depend on timing.
pub fn exec_block_parallel(
    state: &WorldState,
    txs: &[Transaction],
    workers: usize,
    retry_budget: usize,
) -> BlockOutput {
    assert!(workers >= 1, "at least one worker");
    let started = Instant::now();
    let engine = Mutex::new(Engine::new(txs.len(), retry_budget));
    let wake = Condvar::new();
    let committed = RwLock::new(BTreeMap::new());

    let worker = || loop {
        let (idx, begin_seq) = {
            let mut eng = engine.lock().expect("engine poisoned");
            loop {
                let mut progressed = false;
                while eng.commit_next(&committed) {
                    progressed = true;
                }
                if progressed {
                    wake.notify_all();
                }
                if eng.done() {
                    wake.notify_all();
                    return;
                }
                if let Some(claim) = eng.claim() {
                    break claim;
                }
                eng = wake.wait(eng).expect("engine poisoned");
            }
        };
        let view = VersionedView {
            base: state,
            committed: &committed,
        };
        let receipt = execute(&view, &txs[idx]);
        engine
            .lock()
            .expect("engine poisoned")
            .finish(idx, begin_seq, receipt);
        wake.notify_all();
    };

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(worker);
        }
    });

    engine
        .into_inner()
        .expect("engine poisoned")
        .into_output(state, txs, started)
}

/// One step of the virtual-worker driver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    /// Idle worker claims and executes the lowest pending transaction.
    Start(usize),
    /// Busy worker publishes its result.
    Finish(usize),
    /// Try to commit the next transaction in index order.
    Commit,
}

pub trait Schedule {
    /// Pick one of `enabled` (never empty).
    fn choose(&mut self, enabled: &[Action]) -> Action;
}

/// Uniformly random interleaving from a seed.
pub struct SeededSchedule(ChaCha8Rng);

impl SeededSchedule {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl Schedule for SeededSchedule {
    fn choose(&mut self, enabled: &[Action]) -> Action {
        enabled[self.0.gen_range(0..enabled.len())]
    }
}

/// Follows a script; when the scripted action is not enabled (or the
/// script runs out) the first enabled action is taken.
pub struct ScriptedSchedule {
    script: std::collections::VecDeque<Action>,
}

impl ScriptedSchedule {
    pub fn new(script: impl IntoIterator<Item = Action>) -> Self {
        Self {
            script: script.into_iter().collect(),
        }
    }
}

impl Schedule for ScriptedSchedule {
    fn choose(&mut self, enabled: &[Action]) -> Action {
        if let Some(next) = self.script.pop_front() {
            if enabled.contains(&next) {
                return next;
            }
        }
        enabled[0]
    }
}

/// Single-threaded driver with `workers` virtual workers. A worker reads
/// its snapshot when it starts and publishes when it finishes, so anything
/// committed in between is visible only to validation.
pub fn exec_block_scheduled(
    state: &WorldState,
    txs: &[Transaction],
    workers: usize,
    retry_budget: usize,
    schedule: &mut dyn Schedule,
) -> BlockOutput {
    assert!(workers >= 1, "at least one worker");
    let started = Instant::now();
    let mut eng = Engine::new(txs.len(), retry_budget);
    let committed = RwLock::new(BTreeMap::new());
    let mut busy: Vec<Option<(usize, usize, Receipt)>> = vec![None; workers];
    let mut enabled = Vec::with_capacity(workers + 1);

    while !eng.done() {
        enabled.clear();
        let has_pending = !eng.pending.is_empty();
        for (w, b) in busy.iter().enumerate() {
            match b {
                None if has_pending => enabled.push(Action::Start(w)),
                Some(_) => enabled.push(Action::Finish(w)),
                None => {}
            }
        }
        if matches!(eng.slots[eng.next_commit].status, SlotStatus::Executed { .. }) {
            enabled.push(Action::Commit);
        }
        assert!(!enabled.is_empty(), "scheduler stalled");
        match schedule.choose(&enabled) {
            Action::Start(w) => {
                let (idx, begin_seq) = eng.claim().expect("pending slot");
                let view = VersionedView {
                    base: state,
                    committed: &committed,
                };
                busy[w] = Some((idx, begin_seq, execute(&view, &txs[idx])));
            }
            Action::Finish(w) => {
                let (idx, begin_seq, receipt) = busy[w].take().expect("busy worker");
                eng.finish(idx, begin_seq, receipt);
            }
            Action::Commit => {
                eng.commit_next(&committed);
            }
        }
    }
    eng.into_output(state, txs, started)
}
