//! One simulated replica: lanes, consensus, linearizer, executor, store
//! and state consensus, driven only through envelopes and timers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use tipcut_core::commitment::{attest, StateAttestation, StateConsensus, StateQuorumRecord, TallyOutcome, MAX_STATE_LAG};
use tipcut_core::consensus::{
    CommittedCut, ConsFaults, ConsOut, Consensus, ConsensusConfig, Env, Linearizer, Phase,
};
use tipcut_core::crypto::{digest, Hasher, KeyRegistry, ReplicaId, Signature};
use tipcut_core::executor::{exec_block_scheduled, SeededSchedule};
use tipcut_core::lane::{LaneConfig, LaneFaults, LaneOut, LaneReplica};
use tipcut_core::state_machine::WorldState;
use tipcut_core::storage::{Durability, FlatStore, MemoryWal};
use tipcut_core::tx_codec::{decode_transaction, signing_digest, Transaction};
use tipcut_core::types::Word;

use crate::net::{Msg, NodeTimer};
use crate::scenario::{Behavior, FaultSpec, Scenario};
use crate::trace::Event;

/// First byte of a state attestation carried as a lane transaction.
pub const SYSTEM_TX: u8 = 0xFF;
const ATTESTATION_LEN: usize = 1 + 8 + 32 + 4 + 32;

pub fn encode_attestation(a: &StateAttestation) -> Vec<u8> {
    let mut out = Vec::with_capacity(ATTESTATION_LEN);
    out.push(SYSTEM_TX);
    out.extend_from_slice(&a.height.to_be_bytes());
    out.extend_from_slice(&a.commitment);
    out.extend_from_slice(&a.signer.0.to_be_bytes());
    out.extend_from_slice(&a.sig.tag);
    out
}

pub fn decode_attestation(b: &[u8]) -> Option<StateAttestation> {
    if b.len() != ATTESTATION_LEN || b[0] != SYSTEM_TX {
        return None;
    }
    let signer = ReplicaId(u32::from_be_bytes(b[41..45].try_into().ok()?));
    Some(StateAttestation {
        height: u64::from_be_bytes(b[1..9].try_into().ok()?),
        commitment: b[9..41].try_into().ok()?,
        signer,
        sig: Signature {
            signer,
            tag: b[45..77].try_into().ok()?,
        },
    })
}

fn xor_bias(c: &Word, bias: u64) -> Word {
    let mut out = *c;
    for (o, b) in out[24..].iter_mut().zip(bias.to_be_bytes()) {
        *o ^= b;
    }
    out
}

#[derive(Clone, Debug)]
pub enum NodeOut {
    Send(ReplicaId, Msg),
    Timer(u64, NodeTimer),
    Trace(Event),
}

#[derive(Clone, Debug, Default)]
pub struct NodeCounters {
    pub invalid_txs: u64,
    pub occ_aborts: u64,
    pub occ_fallbacks: u64,
}

pub struct Node {
    pub id: ReplicaId,
    n: usize,
    reg: Arc<KeyRegistry>,
    pub lane: LaneReplica,
    pub cons: Consensus,
    pub lin: Linearizer,
    pub state: WorldState,
    pub store: FlatStore,
    pub wal: MemoryWal,
    state_cons: StateConsensus,
    ready: BTreeMap<u64, StateQuorumRecord>,
    embedded: BTreeSet<u64>,
    local_commitments: BTreeMap<u64, Word>,
    queue: VecDeque<CommittedCut>,
    faults: Vec<FaultSpec>,
    base_cons_faults: ConsFaults,
    own_certified_ms: u64,
    exec_workers: usize,
    retry_budget: usize,
    seed: u64,
    pub crashed: bool,
    pub halted: bool,
    pub counters: NodeCounters,
}

impl Node {
    pub fn new(id: ReplicaId, sc: &Scenario, reg: Arc<KeyRegistry>, genesis: &WorldState, seed: u64) -> Self {
        let n = sc.net.n;
        let f = sc.f();
        let signer = reg.signer(id).expect("replica key");
        let post_max = sc.net.delay.max_ms();
        let cfg = ConsensusConfig {
            n,
            f,
            stakes: sc.stakes(),
            timeout_ms: sc.consensus.timeout_ms,
            backoff_factor: sc.consensus.backoff_factor,
            pipelined: sc.consensus.pipelined,
            confirm_grace_ms: sc.consensus.confirm_grace_ms.unwrap_or(post_max),
            omission_grace_ms: sc.consensus.omission_grace_ms.unwrap_or(2 * post_max),
            max_slots: sc.consensus.max_slots,
        };
        let faults: Vec<FaultSpec> = sc.faults.iter().filter(|f| f.replica == id.0).cloned().collect();
        let base_cons_faults = ConsFaults {
            missed_slot_rate: sc.consensus.missed_slot_rate,
            missed_slot_seed: seed,
            ..Default::default()
        };
        let lane = LaneReplica::new(
            id,
            n,
            f,
            signer.clone(),
            LaneConfig {
                batch_cap: sc.lanes.batch_cap,
                fetch_timeout_ms: sc.lanes.fetch_timeout_ms,
            },
            LaneFaults::default(),
        );
        let cons = Consensus::new(id, cfg, signer, base_cons_faults.clone());
        let (mut store, wal) = FlatStore::in_memory(Durability::Manual);
        let genesis_writes = genesis.entries().map(|(k, v)| (*k, *v)).collect();
        store.apply_block(0, &genesis_writes).expect("genesis block");
        store.flush().expect("in-memory flush");
        let mut node = Self {
            id,
            n,
            reg,
            lane,
            cons,
            lin: Linearizer::new(n),
            state: genesis.clone(),
            store,
            wal,
            state_cons: StateConsensus::new(sc.stakes()),
            ready: BTreeMap::new(),
            embedded: BTreeSet::new(),
            local_commitments: BTreeMap::new(),
            queue: VecDeque::new(),
            faults,
            base_cons_faults,
            own_certified_ms: 0,
            exec_workers: sc.execution.workers,
            retry_budget: sc.execution.retry_budget,
            seed,
            crashed: false,
            halted: false,
            counters: NodeCounters::default(),
        };
        node.local_commitments.insert(0, genesis.commitment().value);
        node
    }

    pub fn is_faulty(&self) -> bool {
        !self.faults.is_empty()
    }

    fn active(&self, now: u64) -> impl Iterator<Item = &Behavior> {
        self.faults.iter().filter(move |f| f.active_at(now)).map(|f| &f.behavior)
    }

    /// Apply the fault behaviours active at `now`.
    fn refresh_faults(&mut self, now: u64) {
        if self.faults.is_empty() {
            return;
        }
        let mut lf = LaneFaults::default();
        let mut cf = self.base_cons_faults.clone();
        for b in self.active(now) {
            match b {
                Behavior::EquivocateLane => lf.equivocate = true,
                Behavior::WithholdBatch => lf.withhold = true,
                Behavior::SilentLeader { views } => {
                    cf.silent_leader = Some(views.as_ref().map(|v| v.iter().copied().collect()));
                }
                Behavior::OmitCertifiedTip => cf.omit_certified_tip = true,
                Behavior::EquivocateCut => cf.equivocate_cut = true,
                Behavior::Crash { .. } | Behavior::WrongStateRoot { .. } => {}
            }
        }
        self.lane.set_faults(lf);
        self.cons.set_faults(cf);
    }

    fn state_bias(&self, now: u64) -> Option<u64> {
        self.active(now).find_map(|b| match b {
            Behavior::WrongStateRoot { bias } => Some(*bias),
            _ => None,
        })
    }

    fn learned(&self) -> Vec<u64> {
        let mut l = self.lane.tip_learned_ms().to_vec();
        l[self.id.index()] = self.own_certified_ms;
        l
    }

    fn records(&self) -> Vec<StateQuorumRecord> {
        self.ready.values().cloned().collect()
    }

    fn with_env<R>(&mut self, now: u64, f: impl FnOnce(&mut Consensus, &KeyRegistry, &Env) -> R) -> R {
        let learned = self.learned();
        let records = self.records();
        let tips = self.lane.tips().to_vec();
        let env = Env {
            now_ms: now,
            tips: &tips,
            tip_learned_ms: &learned,
            state_records: &records,
        };
        f(&mut self.cons, &self.reg, &env)
    }

    pub fn start(&mut self, now: u64, out: &mut Vec<NodeOut>) {
        self.refresh_faults(now);
        let mut co = Vec::new();
        self.with_env(now, |c, reg, env| c.start(reg, env, &mut co));
        self.absorb_cons(co, out);
    }

    pub fn crash(&mut self) {
        self.crashed = true;
    }

    pub fn submit(&mut self, now: u64, tx: Vec<u8>, out: &mut Vec<NodeOut>) {
        if self.crashed {
            return;
        }
        self.refresh_faults(now);
        self.lane.submit(tx);
        let mut lo = Vec::new();
        self.lane.maybe_propose(false, &mut lo);
        self.absorb_lane(now, lo, out);
    }

    pub fn on_message(&mut self, now: u64, from: ReplicaId, msg: Msg, out: &mut Vec<NodeOut>) {
        if self.crashed {
            return;
        }
        self.refresh_faults(now);
        match msg {
            Msg::Lane(m) => {
                let mut lo = Vec::new();
                self.lane.on_message(&self.reg, now, from, m, &mut lo);
                self.absorb_lane(now, lo, out);
            }
            Msg::Cons(m) => {
                let mut co = Vec::new();
                self.with_env(now, |c, reg, env| c.on_message(reg, env, from, m, &mut co));
                self.absorb_cons(co, out);
            }
        }
        self.try_execute(now, out);
    }

    pub fn on_timer(&mut self, now: u64, t: NodeTimer, out: &mut Vec<NodeOut>) {
        if self.crashed {
            return;
        }
        self.refresh_faults(now);
        match t {
            NodeTimer::Cons(ct) => {
                let mut co = Vec::new();
                self.with_env(now, |c, reg, env| c.on_timer(reg, env, ct, &mut co));
                self.absorb_cons(co, out);
            }
            NodeTimer::Fetch(id) => {
                let mut lo = Vec::new();
                self.lane.on_fetch_timer(now, id, &mut lo);
                self.absorb_lane(now, lo, out);
            }
        }
        self.try_execute(now, out);
    }

    fn absorb_lane(&mut self, now: u64, lo: Vec<LaneOut>, out: &mut Vec<NodeOut>) {
        let mut again = Vec::new();
        for o in lo {
            match o {
                LaneOut::Send(to, m) => out.push(NodeOut::Send(to, Msg::Lane(m))),
                LaneOut::FetchTimer { id, at_ms } => out.push(NodeOut::Timer(at_ms, NodeTimer::Fetch(id))),
                LaneOut::Certified(poa) => {
                    self.own_certified_ms = now;
                    out.push(NodeOut::Trace(Event::Certified {
                        lane: poa.lane.0,
                        pos: poa.pos,
                        car: poa.car_digest.to_hex(),
                    }));
                    self.lane.maybe_propose(false, &mut again);
                }
                LaneOut::Fetched { .. } => {}
            }
        }
        if !again.is_empty() {
            self.absorb_lane(now, again, out);
        }
    }

    fn absorb_cons(&mut self, co: Vec<ConsOut>, out: &mut Vec<NodeOut>) {
        let me = self.id.0;
        for o in co {
            match o {
                ConsOut::Send(to, m) => out.push(NodeOut::Send(to, Msg::Cons(m))),
                ConsOut::Timer { at_ms, timer } => out.push(NodeOut::Timer(at_ms, NodeTimer::Cons(timer))),
                ConsOut::Committed(c) => {
                    out.push(NodeOut::Trace(Event::Committed {
                        r: me,
                        slot: c.slot,
                        view: c.view,
                        cut: c.cut.digest().to_hex(),
                        leader: self.cons.leader(c.slot, c.view).0,
                        tips: (0..self.n).map(|l| c.cut.tip_pos(l)).collect(),
                        path: match c.cert.phase {
                            Phase::Confirm => "confirm",
                            _ => "commit",
                        }
                        .into(),
                    }));
                    self.queue.push_back(c);
                }
                ConsOut::Proposed { slot, view, cut_digest } => out.push(NodeOut::Trace(Event::Proposed {
                    r: me,
                    slot,
                    view,
                    cut: cut_digest.to_hex(),
                })),
                ConsOut::ViewChange { slot, view } => {
                    out.push(NodeOut::Trace(Event::ViewChange { r: me, slot, view }))
                }
                ConsOut::OmissionFlag { slot, view, lane, .. } => out.push(NodeOut::Trace(Event::Omission {
                    r: me,
                    slot,
                    view,
                    lane: lane.0,
                })),
                ConsOut::Rejected { .. } => {}
            }
        }
    }

    /// Execute committed cuts in order while their cars are all local,
    /// fetching missing ranges otherwise.
    fn try_execute(&mut self, now: u64, out: &mut Vec<NodeOut>) {
        while let Some(c) = self.queue.front() {
            let mut lo = Vec::new();
            let mut complete = true;
            for (tip, from) in self.lin.ranges(&c.cut) {
                if !self.lane.ensure_range(now, tip, from, &mut lo) {
                    complete = false;
                }
            }
            self.absorb_lane(now, lo, out);
            if !complete {
                return;
            }
            let c = self.queue.pop_front().expect("front exists");
            let lane = &self.lane;
            let block = self
                .lin
                .linearize(&c.cut, |tip, from| {
                    lane.range(&tip.car_digest, from).map(|v| v.into_iter().cloned().collect())
                })
                .expect("all cars present");
            self.execute_block(now, block, out);
            if self.halted {
                return;
            }
        }
    }

    fn execute_block(&mut self, now: u64, block: tipcut_core::consensus::Block, out: &mut Vec<NodeOut>) {
        let me = self.id.0;
        let h = block.height;
        let mut txs: Vec<Transaction> = Vec::new();
        let mut digests = Vec::new();
        let mut attestations = Vec::new();
        for raw in &block.txs {
            if raw.first() == Some(&SYSTEM_TX) {
                match decode_attestation(raw) {
                    Some(a) => attestations.push(a),
                    None => self.counters.invalid_txs += 1,
                }
                continue;
            }
            match decode_transaction(raw) {
                Ok(tx) if self.reg.client_verify(&tx.sender.0, &signing_digest(&tx), &tx.signature) => {
                    digests.push(digest(raw).to_hex());
                    txs.push(tx);
                }
                _ => self.counters.invalid_txs += 1,
            }
        }
        let mut sh = Hasher::with_domain("tipcut/sim/exec-schedule");
        sh.update(&self.seed.to_be_bytes()).update(&h.to_be_bytes()).update(&me.to_be_bytes());
        let sched_seed = u64::from_be_bytes(sh.finish().0[..8].try_into().expect("8 bytes"));
        let outp = exec_block_scheduled(
            &self.state,
            &txs,
            self.exec_workers,
            self.retry_budget,
            &mut SeededSchedule::new(sched_seed),
        );
        self.counters.occ_aborts += outp.stats.aborts;
        self.counters.occ_fallbacks += outp.stats.fallback as u64;
        let mut writes = BTreeMap::new();
        for r in &outp.receipts {
            for (k, v) in &r.writes {
                writes.insert(*k, *v);
            }
        }
        self.state = outp.state;
        self.state.set_height(h);
        if let Err(e) = self.store.apply_block(h, &writes).and_then(|_| self.store.flush()) {
            out.push(NodeOut::Trace(Event::Violation {
                r: Some(me),
                what: format!("store: {e}"),
            }));
        }
        let commitment = self.state.commitment().value;
        if self.store.commitment().value != commitment {
            out.push(NodeOut::Trace(Event::Violation {
                r: Some(me),
                what: format!("store commitment diverged from state at height {h}"),
            }));
        }
        self.local_commitments.insert(h, commitment);
        out.push(NodeOut::Trace(Event::Executed {
            r: me,
            height: h,
            slot: block.slot,
            cars: block.cars.iter().map(|(l, p, _)| (l.0, *p)).collect(),
            txs: digests,
            duplicates: block.duplicates.len() as u64,
            commitment: hex::encode(commitment),
            executions: outp.stats.executions,
            aborts: outp.stats.aborts,
            fallback: outp.stats.fallback,
        }));

        // Quorum records committed by this cut.
        for rec in &block.state_records {
            if !self.embedded.insert(rec.height) {
                continue;
            }
            self.ready.remove(&rec.height);
            let lag = h.saturating_sub(rec.height);
            let matches_local = self.local_commitments.get(&rec.height) == Some(&rec.commitment);
            out.push(NodeOut::Trace(Event::StateCommitted {
                r: me,
                height: rec.height,
                at: h,
                lag,
                matches_local,
            }));
            if lag >= MAX_STATE_LAG {
                out.push(NodeOut::Trace(Event::Violation {
                    r: Some(me),
                    what: format!("state lag {lag} for height {}", rec.height),
                }));
            }
        }

        // Attestations ordered by this block.
        for a in attestations {
            let height = a.height;
            self.state_cons.add(a, &self.reg);
            match self.state_cons.outcome(height) {
                Some(TallyOutcome::Committed(rec)) if !self.embedded.contains(&height) => {
                    self.ready.entry(height).or_insert_with(|| rec.clone());
                }
                Some(TallyOutcome::Halted {
                    diverging_stake,
                    total_stake,
                }) if !self.halted => {
                    self.halted = true;
                    self.cons.halt();
                    out.push(NodeOut::Trace(Event::Halted {
                        r: me,
                        height,
                        diverging_stake: *diverging_stake,
                        total_stake: *total_stake,
                    }));
                }
                _ => {}
            }
        }
        let lag_bound = self
            .ready
            .keys()
            .next()
            .is_some_and(|oldest| h.saturating_sub(*oldest) >= MAX_STATE_LAG);
        if lag_bound {
            out.push(NodeOut::Trace(Event::Violation {
                r: Some(me),
                what: format!("state quorum pending for {MAX_STATE_LAG} blocks"),
            }));
        }

        if !self.halted {
            let attested = match self.state_bias(now) {
                Some(b) => xor_bias(&commitment, b),
                None => commitment,
            };
            let signer = self.reg.signer(self.id).expect("own key");
            let att = attest(&signer, h, attested);
            self.lane.submit(encode_attestation(&att));
            let mut lo = Vec::new();
            self.lane.maybe_propose(false, &mut lo);
            self.absorb_lane(now, lo, out);
        }
    }

    pub fn stats_event(&self) -> Event {
        let l = &self.lane.stats;
        let c = &self.cons.stats;
        let s = self.store.stats();
        Event::NodeStats {
            r: self.id.0,
            fetch_requests: l.fetch_requests,
            cars_fetched: l.cars_fetched,
            lane_equivocations_seen: l.equivocations_seen,
            view_changes: c.view_changes,
            timeouts_sent: c.timeouts_sent,
            fast_commits: c.fast_commits,
            confirm_commits: c.confirm_commits,
            omission_flags: c.omission_flags,
            rejected_proposals: c.rejected,
            linearize_regressions: self.lin.stats.regressions,
            linearize_forks: self.lin.stats.forks,
            occ_aborts: self.counters.occ_aborts,
            occ_fallbacks: self.counters.occ_fallbacks,
            cold_reads: s.cold_reads,
            invalid_txs: self.counters.invalid_txs,
            wal_bytes: s.wal_bytes,
        }
    }

    pub fn pending_blocks(&self) -> usize {
        self.queue.len()
    }
}
