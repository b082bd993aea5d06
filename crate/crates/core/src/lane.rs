//! Per-replica data lanes.
//!
//! Every replica owns a lane: a hash chain of cars, each holding a batch of
//! encoded transactions. The owner sends a car to everyone and collects
//! votes; `f + 1` votes (its own included) form a proof of availability
//! (PoA), guaranteeing at least one correct replica stores the car. The
//! owner keeps at most one uncertified car outstanding.
//!
//! Voters vote on a car only if it directly extends the last car they
//! accepted in that lane, and at most once per `(lane, pos)`. A voter that
//! falls behind a certified tip syncs the missing cars from the tip's PoA
//! signers, accepting them without voting.
//!
//! Car wire format: `lane(4 BE) ‖ pos(8 BE) ‖ parent(32) ‖ tx_count(4 BE) ‖
//! (len(4 BE) ‖ tx)*`. The car digest is the digest of this encoding.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::crypto::{digest, Digest, Hasher, KeyRegistry, ReplicaId, Signature, Signer};

pub const DEFAULT_BATCH_CAP: usize = 512;

#[derive(Clone, PartialEq, Eq)]
pub struct Car {
    pub lane: ReplicaId,
    pub pos: u64,
    pub parent: Digest,
    pub batch: Vec<Vec<u8>>,
    pub digest: Digest,
}

impl std::fmt::Debug for Car {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Car({}@{} {} txs {})",
            self.lane,
            self.pos,
            self.batch.len(),
            self.digest.short()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CarDecodeError {
    #[error("car truncated at offset {0}")]
    Truncated(usize),
    #[error("{0} trailing byte(s) after the last transaction")]
    Trailing(usize),
}

fn encode_car(lane: ReplicaId, pos: u64, parent: &Digest, batch: &[Vec<u8>]) -> Vec<u8> {
    let size: usize = batch.iter().map(|t| 4 + t.len()).sum();
    let mut out = Vec::with_capacity(48 + size);
    out.extend_from_slice(&lane.0.to_be_bytes());
    out.extend_from_slice(&pos.to_be_bytes());
    out.extend_from_slice(&parent.0);
    out.extend_from_slice(&(batch.len() as u32).to_be_bytes());
    for tx in batch {
        out.extend_from_slice(&(tx.len() as u32).to_be_bytes());
        out.extend_from_slice(tx);
    }
    out
}

impl Car {
    pub fn new(lane: ReplicaId, pos: u64, parent: Digest, batch: Vec<Vec<u8>>) -> Self {
        let digest = digest(&encode_car(lane, pos, &parent, &batch));
        Self {
            lane,
            pos,
            parent,
            batch,
            digest,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_car(self.lane, self.pos, &self.parent, &self.batch)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CarDecodeError> {
        let mut off = 0;
        let mut take = |n: usize| -> Result<&[u8], CarDecodeError> {
            let s = buf.get(off..off + n).ok_or(CarDecodeError::Truncated(off))?;
            off += n;
            Ok(s)
        };
        let lane = ReplicaId(u32::from_be_bytes(take(4)?.try_into().expect("4")));
        let pos = u64::from_be_bytes(take(8)?.try_into().expect("8"));
        let parent = Digest(take(32)?.try_into().expect("32"));
        let count = u32::from_be_bytes(take(4)?.try_into().expect("4"));
        let mut batch = Vec::with_capacity((count as usize).min(4096));
        for _ in 0..count {
            let len = u32::from_be_bytes(take(4)?.try_into().expect("4")) as usize;
            batch.push(take(len)?.to_vec());
        }
        if off != buf.len() {
            return Err(CarDecodeError::Trailing(buf.len() - off));
        }
        Ok(Car::new(lane, pos, parent, batch))
    }

    /// Digest recomputation matches the stored digest.
    pub fn is_consistent(&self) -> bool {
        digest(&self.encode()) == self.digest
    }
}

/// Message a voter signs for a car.
pub fn car_vote_message(lane: ReplicaId, pos: u64, car: &Digest) -> Digest {
    let mut h = Hasher::with_domain("tipcut/car-vote/v1");
    h.update(&lane.0.to_be_bytes()).update(&pos.to_be_bytes()).update(&car.0);
    h.finish()
}

pub fn poa_quorum(f: usize) -> usize {
    f + 1
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoACert {
    pub lane: ReplicaId,
    pub pos: u64,
    pub car_digest: Digest,
    pub votes: Vec<Signature>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PoaError {
    #[error("{valid} distinct valid vote(s), {needed} needed")]
    Insufficient { valid: usize, needed: usize },
}

impl PoACert {
    pub fn size(&self) -> usize {
        self.votes.len()
    }

    pub fn signers(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        self.votes.iter().map(|s| s.signer)
    }

    pub fn verify(&self, reg: &KeyRegistry, f: usize) -> bool {
        let msg = car_vote_message(self.lane, self.pos, &self.car_digest);
        let mut seen = BTreeSet::new();
        self.votes.len() >= poa_quorum(f)
            && self
                .votes
                .iter()
                .all(|s| seen.insert(s.signer) && reg.verify(s, &msg))
    }
}

/// Keep distinct, valid votes; certify once there are `f + 1`.
pub fn assemble_poa(
    lane: ReplicaId,
    pos: u64,
    car_digest: Digest,
    votes: &[Signature],
    reg: &KeyRegistry,
    f: usize,
) -> Result<PoACert, PoaError> {
    let msg = car_vote_message(lane, pos, &car_digest);
    let mut by_signer = BTreeMap::new();
    for v in votes {
        if reg.verify(v, &msg) {
            by_signer.entry(v.signer).or_insert(*v);
        }
    }
    let needed = poa_quorum(f);
    if by_signer.len() < needed {
        return Err(PoaError::Insufficient {
            valid: by_signer.len(),
            needed,
        });
    }
    Ok(PoACert {
        lane,
        pos,
        car_digest,
        votes: by_signer.into_values().take(needed).collect(),
    })
}

/// A lane's certified tip.
pub type LaneTip = PoACert;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LaneMsg {
    Car(Car),
    Vote {
        lane: ReplicaId,
        pos: u64,
        car_digest: Digest,
        sig: Signature,
    },
    Poa(PoACert),
    FetchReq {
        id: u64,
        lane: ReplicaId,
        tip: Digest,
        from_pos: u64,
    },
    FetchResp {
        id: u64,
        cars: Vec<Car>,
    },
}

impl LaneMsg {
    pub fn kind(&self) -> &'static str {
        match self {
            LaneMsg::Car(_) => "car",
            LaneMsg::Vote { .. } => "car_vote",
            LaneMsg::Poa(_) => "poa",
            LaneMsg::FetchReq { .. } => "fetch_req",
            LaneMsg::FetchResp { .. } => "fetch_resp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LaneOut {
    Send(ReplicaId, LaneMsg),
    /// Retry timer for fetch `id` at the given time.
    FetchTimer { id: u64, at_ms: u64 },
    Certified(PoACert),
    Fetched { lane: ReplicaId, cars: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LaneFaults {
    /// Propose two different cars at every position.
    pub equivocate: bool,
    /// Send cars to only `f` peers and ignore fetch requests.
    pub withhold: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LaneConfig {
    pub batch_cap: usize,
    pub fetch_timeout_ms: u64,
}

impl Default for LaneConfig {
    fn default() -> Self {
        Self {
            batch_cap: DEFAULT_BATCH_CAP,
            fetch_timeout_ms: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LaneStats {
    pub cars_proposed: u64,
    pub heartbeat_cars: u64,
    pub votes_cast: u64,
    pub rejected_parent: u64,
    pub rejected_duplicate: u64,
    pub rejected_stale: u64,
    pub equivocations_seen: u64,
    pub gaps_buffered: u64,
    pub fetch_requests: u64,
    pub fetch_retries: u64,
    pub cars_fetched: u64,
    pub fetches_served: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VoteDecision {
    Vote(Signature),
    /// Waiting for the predecessor.
    Buffered,
    RejectDuplicate,
    RejectParent,
    RejectStale,
    RejectMalformed,
}

#[derive(Clone, Debug)]
struct Outstanding {
    cars: Vec<Car>,
    votes: BTreeMap<Digest, BTreeMap<ReplicaId, Signature>>,
}

#[derive(Clone, Debug)]
struct Fetch {
    lane: ReplicaId,
    tip: Digest,
    from_pos: u64,
    signers: Vec<ReplicaId>,
    attempt: usize,
    purpose: FetchPurpose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FetchPurpose {
    /// Catch the voter chain up to a certified tip.
    Sync { tip_pos: u64 },
    /// Retrieve a range needed for execution.
    Range,
}

/// One replica's lane machinery: its own lane as owner, every lane as
/// voter, the car store and the fetcher.
pub struct LaneReplica {
    me: ReplicaId,
    n: usize,
    f: usize,
    cfg: LaneConfig,
    faults: LaneFaults,
    signer: Signer,

    pending: VecDeque<Vec<u8>>,
    next_pos: u64,
    last_digest: Digest,
    outstanding: Option<Outstanding>,

    accepted: Vec<Option<(u64, Digest)>>,
    voted: BTreeMap<(ReplicaId, u64), Digest>,
    buffered: BTreeMap<(ReplicaId, u64), Vec<Car>>,

    store: BTreeMap<Digest, Car>,
    tips: Vec<Option<PoACert>>,
    tip_learned_ms: Vec<u64>,

    fetches: BTreeMap<u64, Fetch>,
    next_fetch_id: u64,

    pub stats: LaneStats,
}

impl LaneReplica {
    pub fn new(
        me: ReplicaId,
        n: usize,
        f: usize,
        signer: Signer,
        cfg: LaneConfig,
        faults: LaneFaults,
    ) -> Self {
        Self {
            me,
            n,
            f,
            cfg,
            faults,
            signer,
            pending: VecDeque::new(),
            next_pos: 0,
            last_digest: Digest::ZERO,
            outstanding: None,
            accepted: vec![None; n],
            voted: BTreeMap::new(),
            buffered: BTreeMap::new(),
            store: BTreeMap::new(),
            tips: vec![None; n],
            tip_learned_ms: vec![0; n],
            fetches: BTreeMap::new(),
            next_fetch_id: 0,
            stats: LaneStats::default(),
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.me
    }

    pub fn set_faults(&mut self, faults: LaneFaults) {
        self.faults = faults;
    }

    pub fn tips(&self) -> &[Option<PoACert>] {
        &self.tips
    }

    /// When each lane's current tip was learned.
    pub fn tip_learned_ms(&self) -> &[u64] {
        &self.tip_learned_ms
    }

    pub fn car(&self, d: &Digest) -> Option<&Car> {
        self.store.get(d)
    }

    pub fn has_car(&self, d: &Digest) -> bool {
        self.store.contains_key(d)
    }

    pub fn stored_cars(&self) -> usize {
        self.store.len()
    }

    pub fn pending_txs(&self) -> usize {
        self.pending.len()
    }

    pub fn has_outstanding(&self) -> bool {
        self.outstanding.is_some()
    }

    /// Every `(lane, pos) → digest` this replica voted for.
    pub fn vote_log(&self) -> &BTreeMap<(ReplicaId, u64), Digest> {
        &self.voted
    }

    pub fn accepted(&self, lane: ReplicaId) -> Option<(u64, Digest)> {
        self.accepted[lane.index()]
    }

    fn broadcast(&self, msg: LaneMsg, out: &mut Vec<LaneOut>) {
        for r in 0..self.n as u32 {
            if r != self.me.0 {
                out.push(LaneOut::Send(ReplicaId(r), msg.clone()));
            }
        }
    }

    /// Queue a transaction for this replica's lane.
    pub fn submit(&mut self, tx: Vec<u8>) {
        self.pending.push_back(tx);
    }

    /// Propose the next car if none is outstanding. `heartbeat` allows an
    /// empty car.
    pub fn maybe_propose(&mut self, heartbeat: bool, out: &mut Vec<LaneOut>) -> Option<Car> {
        if self.outstanding.is_some() || (self.pending.is_empty() && !heartbeat) {
            return None;
        }
        let take = self.pending.len().min(self.cfg.batch_cap);
        let batch: Vec<Vec<u8>> = self.pending.drain(..take).collect();
        Some(self.propose_car(batch, out))
    }

    /// Build, self-vote and send the next car.
    pub fn propose_car(&mut self, batch: Vec<Vec<u8>>, out: &mut Vec<LaneOut>) -> Car {
        assert!(self.outstanding.is_none(), "one uncertified car at a time");
        if batch.is_empty() {
            self.stats.heartbeat_cars += 1;
        }
        self.stats.cars_proposed += 1;
        let car = Car::new(self.me, self.next_pos, self.last_digest, batch.clone());
        let mut cars = vec![car.clone()];
        if self.faults.equivocate {
            let mut alt = batch;
            alt.push(format!("equivocation {}", self.next_pos).into_bytes());
            cars.push(Car::new(self.me, self.next_pos, self.last_digest, alt));
        }
        let mut votes = BTreeMap::new();
        for (i, c) in cars.iter().enumerate() {
            self.store.insert(c.digest, c.clone());
            let mut v = BTreeMap::new();
            if i == 0 {
                v.insert(self.me, self.sign_car(c));
            }
            votes.insert(c.digest, v);
        }
        self.voted.insert((self.me, car.pos), car.digest);
        self.accepted[self.me.index()] = Some((car.pos, car.digest));
        self.stats.votes_cast += 1;

        let others: Vec<ReplicaId> = (0..self.n as u32)
            .map(ReplicaId)
            .filter(|r| *r != self.me)
            .collect();
        if self.faults.withhold {
            for k in 0..self.f {
                let to = others[k % others.len()];
                out.push(LaneOut::Send(to, LaneMsg::Car(car.clone())));
            }
        } else if cars.len() == 2 {
            let half = others.len() / 2;
            for (k, to) in others.iter().enumerate() {
                let c = if k < half { &cars[1] } else { &cars[0] };
                out.push(LaneOut::Send(*to, LaneMsg::Car(c.clone())));
            }
        } else {
            for to in &others {
                out.push(LaneOut::Send(*to, LaneMsg::Car(car.clone())));
            }
        }
        self.outstanding = Some(Outstanding { cars, votes });
        self.try_certify(out);
        car
    }

    fn sign_car(&self, car: &Car) -> Signature {
        self.signer
            .sign(&car_vote_message(car.lane, car.pos, &car.digest))
    }

    fn try_certify(&mut self, out: &mut Vec<LaneOut>) -> Option<PoACert> {
        let o = self.outstanding.as_ref()?;
        let quorum = poa_quorum(self.f);
        let car = o.cars.iter().find(|c| o.votes[&c.digest].len() >= quorum)?.clone();
        let votes: Vec<Signature> = o.votes[&car.digest].values().copied().collect();
        let poa = PoACert {
            lane: self.me,
            pos: car.pos,
            car_digest: car.digest,
            votes: votes.into_iter().take(quorum).collect(),
        };
        self.outstanding = None;
        self.next_pos = car.pos + 1;
        self.last_digest = car.digest;
        self.voted.insert((self.me, car.pos), car.digest);
        self.accepted[self.me.index()] = Some((car.pos, car.digest));
        self.tips[self.me.index()] = Some(poa.clone());
        self.broadcast(LaneMsg::Poa(poa.clone()), out);
        out.push(LaneOut::Certified(poa.clone()));
        Some(poa)
    }

    /// Voter-side decision for a car received from `from`.
    pub fn vote_on_car(&mut self, from: ReplicaId, car: Car) -> VoteDecision {
        if car.lane != from || car.lane == self.me || !car.is_consistent() {
            return VoteDecision::RejectMalformed;
        }
        self.store.entry(car.digest).or_insert_with(|| car.clone());
        let key = (car.lane, car.pos);
        if let Some(prev) = self.voted.get(&key) {
            if *prev != car.digest {
                self.stats.equivocations_seen += 1;
            }
            self.stats.rejected_duplicate += 1;
            return VoteDecision::RejectDuplicate;
        }
        let expected = self.accepted[car.lane.index()].map_or(0, |(p, _)| p + 1);
        if car.pos < expected {
            self.stats.rejected_stale += 1;
            return VoteDecision::RejectStale;
        }
        if car.pos > expected {
            self.stats.gaps_buffered += 1;
            self.buffered.entry(key).or_default().push(car);
            return VoteDecision::Buffered;
        }
        let parent = self.accepted[car.lane.index()].map_or(Digest::ZERO, |(_, d)| d);
        if car.parent != parent {
            self.stats.rejected_parent += 1;
            return VoteDecision::RejectParent;
        }
        self.voted.insert(key, car.digest);
        self.accepted[car.lane.index()] = Some((car.pos, car.digest));
        self.stats.votes_cast += 1;
        VoteDecision::Vote(self.sign_car(&car))
    }

    fn drain_buffered(&mut self, lane: ReplicaId, out: &mut Vec<LaneOut>) {
        loop {
            let next = self.accepted[lane.index()].map_or(0, |(p, _)| p + 1);
            self.buffered.retain(|(l, p), _| *l != lane || *p >= next);
            let Some(cars) = self.buffered.remove(&(lane, next)) else {
                return;
            };
            let mut progressed = false;
            for car in cars {
                if let VoteDecision::Vote(sig) = self.vote_on_car(lane, car.clone()) {
                    out.push(LaneOut::Send(
                        lane,
                        LaneMsg::Vote {
                            lane,
                            pos: car.pos,
                            car_digest: car.digest,
                            sig,
                        },
                    ));
                    progressed = true;
                    break;
                }
            }
            if !progressed {
                return;
            }
        }
    }

    pub fn on_message(
        &mut self,
        reg: &KeyRegistry,
        now_ms: u64,
        from: ReplicaId,
        msg: LaneMsg,
        out: &mut Vec<LaneOut>,
    ) {
        match msg {
            LaneMsg::Car(car) => {
                let lane = car.lane;
                let (pos, d) = (car.pos, car.digest);
                if let VoteDecision::Vote(sig) = self.vote_on_car(from, car) {
                    out.push(LaneOut::Send(
                        lane,
                        LaneMsg::Vote {
                            lane,
                            pos,
                            car_digest: d,
                            sig,
                        },
                    ));
                    self.drain_buffered(lane, out);
                }
            }
            LaneMsg::Vote {
                lane,
                pos,
                car_digest,
                sig,
            } => {
                if lane != self.me || sig.signer != from {
                    return;
                }
                if !reg.verify(&sig, &car_vote_message(lane, pos, &car_digest)) {
                    return;
                }
                let Some(o) = self.outstanding.as_mut() else {
                    return;
                };
                if let Some(v) = o.votes.get_mut(&car_digest) {
                    v.entry(from).or_insert(sig);
                    self.try_certify(out);
                    if self.outstanding.is_none() {
                        self.maybe_propose(false, out);
                    }
                }
            }
            LaneMsg::Poa(poa) => self.on_poa(reg, now_ms, poa, out),
            LaneMsg::FetchReq {
                id,
                lane,
                tip,
                from_pos,
            } => {
                if self.faults.withhold && lane == self.me {
                    return;
                }
                let cars = self.chain_down(&tip, from_pos);
                if !cars.is_empty() {
                    self.stats.fetches_served += 1;
                    out.push(LaneOut::Send(from, LaneMsg::FetchResp { id, cars }));
                }
            }
            LaneMsg::FetchResp { id, cars } => self.on_fetch_resp(now_ms, from, id, cars, out),
        }
    }

    /// Cars from `tip` back to `from_pos`, highest first, stopping at the
    /// first missing one.
    fn chain_down(&self, tip: &Digest, from_pos: u64) -> Vec<Car> {
        let mut cars = Vec::new();
        let mut cur = *tip;
        while let Some(c) = self.store.get(&cur) {
            cars.push(c.clone());
            if c.pos <= from_pos || c.pos == 0 {
                break;
            }
            cur = c.parent;
        }
        cars
    }

    /// Adopt a certified tip; sync the voter chain if it is behind.
    pub fn on_poa(&mut self, reg: &KeyRegistry, now_ms: u64, poa: PoACert, out: &mut Vec<LaneOut>) {
        let lane = poa.lane;
        if lane.index() >= self.n || !poa.verify(reg, self.f) {
            return;
        }
        let newer = self.tips[lane.index()]
            .as_ref()
            .is_none_or(|t| poa.pos > t.pos);
        if newer {
            self.tips[lane.index()] = Some(poa.clone());
            self.tip_learned_ms[lane.index()] = now_ms;
        }
        if lane == self.me {
            return;
        }
        let expected = self.accepted[lane.index()].map_or(0, |(p, _)| p + 1);
        if poa.pos >= expected && !self.has_car(&poa.car_digest) {
            let inflight = self
                .fetches
                .values()
                .any(|f| f.lane == lane && matches!(f.purpose, FetchPurpose::Sync { tip_pos } if tip_pos >= poa.pos));
            if !inflight {
                self.start_fetch(now_ms, &poa, expected, FetchPurpose::Sync { tip_pos: poa.pos }, out);
            }
        } else if poa.pos >= expected {
            self.adopt_chain(lane, &poa.car_digest, expected, out);
        }
    }

    /// Accept a certified chain ending at `tip` (all cars down to `expected`
    /// are stored) without voting.
    fn adopt_chain(&mut self, lane: ReplicaId, tip: &Digest, expected: u64, out: &mut Vec<LaneOut>) {
        let chain = self.chain_down(tip, expected);
        let complete = chain.last().is_some_and(|c| c.pos <= expected || c.pos == 0);
        if !complete {
            return;
        }
        let top = &chain[0];
        self.accepted[lane.index()] = Some((top.pos, top.digest));
        self.drain_buffered(lane, out);
    }

    fn start_fetch(
        &mut self,
        now_ms: u64,
        poa: &PoACert,
        from_pos: u64,
        purpose: FetchPurpose,
        out: &mut Vec<LaneOut>,
    ) -> u64 {
        let mut signers: Vec<ReplicaId> = poa.signers().filter(|s| *s != self.me).collect();
        // Spread load: start from a replica-dependent offset.
        if !signers.is_empty() {
            let k = (self.me.index() + poa.pos as usize) % signers.len();
            signers.rotate_left(k);
        }
        let id = self.next_fetch_id;
        self.next_fetch_id += 1;
        self.stats.fetch_requests += 1;
        self.fetches.insert(
            id,
            Fetch {
                lane: poa.lane,
                tip: poa.car_digest,
                from_pos,
                signers,
                attempt: 0,
                purpose,
            },
        );
        self.send_fetch(now_ms, id, out);
        id
    }

    fn send_fetch(&mut self, now_ms: u64, id: u64, out: &mut Vec<LaneOut>) {
        let Some(f) = self.fetches.get(&id) else {
            return;
        };
        if f.signers.is_empty() {
            return;
        }
        let to = f.signers[f.attempt % f.signers.len()];
        let rounds = (f.attempt / f.signers.len()) as u32;
        let wait = self.cfg.fetch_timeout_ms << rounds.min(6);
        out.push(LaneOut::Send(
            to,
            LaneMsg::FetchReq {
                id,
                lane: f.lane,
                tip: f.tip,
                from_pos: f.from_pos,
            },
        ));
        out.push(LaneOut::FetchTimer {
            id,
            at_ms: now_ms + wait,
        });
    }

    /// Retry timer for fetch `id` fired.
    pub fn on_fetch_timer(&mut self, now_ms: u64, id: u64, out: &mut Vec<LaneOut>) {
        if let Some(f) = self.fetches.get_mut(&id) {
            f.attempt += 1;
            self.stats.fetch_retries += 1;
            self.send_fetch(now_ms, id, out);
        }
    }

    fn on_fetch_resp(
        &mut self,
        now_ms: u64,
        from: ReplicaId,
        id: u64,
        cars: Vec<Car>,
        out: &mut Vec<LaneOut>,
    ) {
        let Some(f) = self.fetches.get(&id).cloned() else {
            return;
        };
        // Highest first; each must hash correctly and link to the previous.
        let mut want = f.tip;
        let mut got = 0;
        let mut lowest = None;
        for car in cars {
            if car.digest != want || car.lane != f.lane || !car.is_consistent() {
                break;
            }
            want = car.parent;
            lowest = Some(car.pos);
            if self.store.insert(car.digest, car).is_none() {
                got += 1;
            }
        }
        self.stats.cars_fetched += got;
        if got > 0 {
            out.push(LaneOut::Fetched {
                lane: f.lane,
                cars: got as usize,
            });
        }
        let done = self.chain_complete(&f.tip, f.from_pos);
        if done {
            self.fetches.remove(&id);
            if let FetchPurpose::Sync { .. } = f.purpose {
                let expected = self.accepted[f.lane.index()].map_or(0, |(p, _)| p + 1);
                self.adopt_chain(f.lane, &f.tip, expected, out);
            }
        } else if lowest.is_some() {
            // Partial answer: ask the same signer for the rest right away.
            let f = self.fetches.get_mut(&id).expect("fetch present");
            if let Some(i) = f.signers.iter().position(|s| *s == from) {
                f.attempt = i;
            }
            self.send_fetch(now_ms, id, out);
        }
    }

    fn chain_complete(&self, tip: &Digest, from_pos: u64) -> bool {
        self.chain_down(tip, from_pos)
            .last()
            .is_some_and(|c| c.pos <= from_pos || c.pos == 0)
    }

    /// Make sure every car from `from_pos` up to `tip` is stored, fetching
    /// from the tip's PoA signers if not. Returns true when already
    /// complete.
    pub fn ensure_range(
        &mut self,
        now_ms: u64,
        tip: &PoACert,
        from_pos: u64,
        out: &mut Vec<LaneOut>,
    ) -> bool {
        if self.chain_complete(&tip.car_digest, from_pos) {
            return true;
        }
        let inflight = self
            .fetches
            .values()
            .any(|f| f.tip == tip.car_digest && f.from_pos <= from_pos);
        if !inflight {
            self.start_fetch(now_ms, tip, from_pos, FetchPurpose::Range, out);
        }
        false
    }

    /// Cars `from_pos..=tip.pos` in position order, if all stored.
    pub fn range(&self, tip: &Digest, from_pos: u64) -> Option<Vec<&Car>> {
        let mut cars = Vec::new();
        let mut cur = *tip;
        loop {
            let c = self.store.get(&cur)?;
            cars.push(c);
            if c.pos <= from_pos || c.pos == 0 {
                break;
            }
            cur = c.parent;
        }
        cars.reverse();
        Some(cars)
    }

    pub fn fetches_in_flight(&self) -> usize {
        self.fetches.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n: usize) -> (KeyRegistry, Vec<LaneReplica>) {
        let f = (n - 1) / 3;
        let reg = KeyRegistry::generate(n, 9);
        let reps = (0..n as u32)
            .map(|i| {
                LaneReplica::new(
                    ReplicaId(i),
                    n,
                    f,
                    reg.signer(ReplicaId(i)).unwrap(),
                    LaneConfig::default(),
                    LaneFaults::default(),
                )
            })
            .collect();
        (reg, reps)
    }

    /// Deliver every send immediately, in order; pending fetch timers fire
    /// once the queue drains. Returns certified PoAs.
    fn pump(reg: &KeyRegistry, reps: &mut [LaneReplica], from: usize, out: Vec<LaneOut>) -> Vec<PoACert> {
        pump_except(reg, reps, from, out, None)
    }

    /// As [`pump`], dropping everything addressed to `deaf`.
    fn pump_except(
        reg: &KeyRegistry,
        reps: &mut [LaneReplica],
        from: usize,
        out: Vec<LaneOut>,
        deaf: Option<usize>,
    ) -> Vec<PoACert> {
        let mut queue: VecDeque<(usize, LaneOut)> = out.into_iter().map(|o| (from, o)).collect();
        let mut certs = vec![];
        let mut timers = VecDeque::new();
        for _ in 0..100 {
            while let Some((src, o)) = queue.pop_front() {
                match o {
                    LaneOut::Send(to, _) if Some(to.index()) == deaf => {}
                    LaneOut::Send(to, msg) => {
                        let mut more = vec![];
                        reps[to.index()].on_message(reg, 0, ReplicaId(src as u32), msg, &mut more);
                        queue.extend(more.into_iter().map(|m| (to.index(), m)));
                    }
                    LaneOut::Certified(p) => certs.push(p),
                    LaneOut::FetchTimer { id, .. } => timers.push_back((src, id)),
                    LaneOut::Fetched { .. } => {}
                }
            }
            let Some((r, id)) = timers.pop_front() else {
                break;
            };
            let mut more = vec![];
            reps[r].on_fetch_timer(0, id, &mut more);
            queue.extend(more.into_iter().map(|m| (r, m)));
        }
        certs
    }

    #[test]
    fn car_wire_roundtrip_and_digest() {
        let car = Car::new(ReplicaId(2), 7, digest(b"p"), vec![vec![1, 2, 3], vec![]]);
        let bytes = car.encode();
        assert_eq!(bytes.len(), 4 + 8 + 32 + 4 + (4 + 3) + 4);
        assert_eq!(&bytes[..4], &[0, 0, 0, 2]);
        assert_eq!(Car::decode(&bytes).unwrap(), car);
        assert_eq!(car.digest, digest(&bytes));
        assert_eq!(Car::decode(&bytes[..bytes.len() - 1]), Err(CarDecodeError::Truncated(55)));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(Car::decode(&long), Err(CarDecodeError::Trailing(1)));
    }

    #[test]
    fn first_and_second_car_chain() {
        let (reg, mut reps) = setup(4);
        let mut out = vec![];
        reps[0].submit(b"tx".to_vec());
        let first = reps[0].maybe_propose(false, &mut out).unwrap();
        assert_eq!(first.pos, 0);
        assert_eq!(first.parent, Digest::ZERO);
        let certs = pump(&reg, &mut reps, 0, out);
        assert_eq!(certs.len(), 1);
        let mut out = vec![];
        reps[0].submit(b"tx2".to_vec());
        let second = reps[0].maybe_propose(false, &mut out).unwrap();
        assert_eq!(second.pos, 1);
        assert_eq!(second.parent, first.digest);
    }

    #[test]
    fn poa_threshold_n4() {
        let reg = KeyRegistry::generate(4, 1);
        let car = Car::new(ReplicaId(0), 0, Digest::ZERO, vec![]);
        let m = car_vote_message(car.lane, 0, &car.digest);
        let v0 = reg.sign(ReplicaId(0), &m).unwrap();
        let v1 = reg.sign(ReplicaId(1), &m).unwrap();
        let cert = assemble_poa(car.lane, 0, car.digest, &[v0], &reg, 1);
        assert_eq!(cert, Err(PoaError::Insufficient { valid: 1, needed: 2 }));
        let cert = assemble_poa(car.lane, 0, car.digest, &[v0, v1], &reg, 1).unwrap();
        assert_eq!(cert.size(), 2);
        assert!(cert.verify(&reg, 1));
        let mut bad = v1;
        bad.tag[0] ^= 1;
        assert!(assemble_poa(car.lane, 0, car.digest, &[v0, bad], &reg, 1).is_err());
        assert!(assemble_poa(car.lane, 0, car.digest, &[v0, v0], &reg, 1).is_err());
        let dup = PoACert {
            lane: car.lane,
            pos: 0,
            car_digest: car.digest,
            votes: vec![v0, v0],
        };
        assert!(!dup.verify(&reg, 1));
    }

    #[test]
    fn voter_rules() {
        let (_, mut reps) = setup(4);
        let c0 = Car::new(ReplicaId(1), 0, Digest::ZERO, vec![b"a".to_vec()]);
        let c0b = Car::new(ReplicaId(1), 0, Digest::ZERO, vec![b"b".to_vec()]);
        let c1 = Car::new(ReplicaId(1), 1, c0.digest, vec![]);
        let c2 = Car::new(ReplicaId(1), 2, c1.digest, vec![]);
        let v = &mut reps[0];
        assert!(matches!(v.vote_on_car(ReplicaId(1), c0.clone()), VoteDecision::Vote(_)));
        assert_eq!(v.vote_on_car(ReplicaId(1), c0b), VoteDecision::RejectDuplicate);
        assert_eq!(v.stats.equivocations_seen, 1);
        assert_eq!(v.vote_on_car(ReplicaId(1), c2.clone()), VoteDecision::Buffered);
        let wrong_parent = Car::new(ReplicaId(1), 1, digest(b"x"), vec![]);
        assert_eq!(v.vote_on_car(ReplicaId(1), wrong_parent), VoteDecision::RejectParent);
        let mut out = vec![];
        let reg = KeyRegistry::generate(4, 9);
        v.on_message(&reg, 0, ReplicaId(1), LaneMsg::Car(c1), &mut out);
        // Voting on c1 releases the buffered c2.
        assert_eq!(out.len(), 2);
        assert_eq!(v.accepted(ReplicaId(1)).unwrap().0, 2);
        // Forged sender.
        let c3 = Car::new(ReplicaId(1), 3, c2.digest, vec![]);
        assert_eq!(v.vote_on_car(ReplicaId(2), c3), VoteDecision::RejectMalformed);
    }

    #[test]
    fn missed_broadcast_is_fetched_from_signer() {
        let (reg, mut reps) = setup(4);
        // Lane 0 proposes a chain of 5 certified cars; replica 3 misses all of them.
        let mut tip = None;
        for i in 0..5u8 {
            reps[0].submit(vec![i]);
            let mut out = vec![];
            reps[0].maybe_propose(false, &mut out);
            tip = pump_except(&reg, &mut reps, 0, out, Some(3)).pop();
        }
        let tip = tip.unwrap();
        assert_eq!(tip.pos, 4);
        let mut out = vec![];
        assert!(!reps[3].ensure_range(0, &tip, 0, &mut out));
        pump(&reg, &mut reps, 3, out);
        let cars = reps[3].range(&tip.car_digest, 0).unwrap();
        assert_eq!(cars.len(), 5);
        assert!(cars.windows(2).all(|w| w[1].parent == w[0].digest));
        // Already present: immediate.
        assert!(reps[3].ensure_range(0, &tip, 0, &mut vec![]));
    }

    #[test]
    fn fetch_rotates_past_silent_signer() {
        let (reg, mut reps) = setup(4);
        reps[0].submit(vec![1]);
        let mut out = vec![];
        reps[0].maybe_propose(false, &mut out);
        let tip = pump_except(&reg, &mut reps, 0, out, Some(3)).pop().unwrap();
        let mut out = vec![];
        reps[3].ensure_range(0, &tip, 0, &mut out);
        // Drop the first request as if the signer were crashed, then fire the timer.
        let (id, first_to) = out
            .iter()
            .find_map(|o| match o {
                LaneOut::Send(to, LaneMsg::FetchReq { id, .. }) => Some((*id, *to)),
                _ => None,
            })
            .unwrap();
        let mut retry = vec![];
        let _ = out;
        reps[3].on_fetch_timer(500, id, &mut retry);
        let second_to = retry
            .iter()
            .find_map(|o| match o {
                LaneOut::Send(to, LaneMsg::FetchReq { .. }) => Some(*to),
                _ => None,
            })
            .unwrap();
        assert_ne!(first_to, second_to);
        pump(&reg, &mut reps, 3, retry);
        assert!(reps[3].has_car(&tip.car_digest));
    }

    #[test]
    fn withholding_owner_still_certifies_and_others_fetch() {
        let n = 4;
        let reg = KeyRegistry::generate(n, 9);
        let mut reps: Vec<LaneReplica> = (0..n as u32)
            .map(|i| {
                LaneReplica::new(
                    ReplicaId(i),
                    n,
                    1,
                    reg.signer(ReplicaId(i)).unwrap(),
                    LaneConfig::default(),
                    LaneFaults {
                        withhold: i == 0,
                        ..Default::default()
                    },
                )
            })
            .collect();
        reps[0].submit(vec![9]);
        let mut out = vec![];
        reps[0].maybe_propose(false, &mut out);
        let car_sends = out
            .iter()
            .filter(|o| matches!(o, LaneOut::Send(_, LaneMsg::Car(_))))
            .count();
        assert_eq!(car_sends, 1);
        let tip = pump(&reg, &mut reps, 0, out).pop().unwrap();
        // The PoA broadcast made the others sync from the correct signer.
        for r in &reps[1..] {
            assert!(r.has_car(&tip.car_digest));
        }
    }

    #[test]
    fn equivocating_lane_gets_at_most_one_vote_per_correct_voter() {
        let n = 4;
        let reg = KeyRegistry::generate(n, 9);
        let mut reps: Vec<LaneReplica> = (0..n as u32)
            .map(|i| {
                LaneReplica::new(
                    ReplicaId(i),
                    n,
                    1,
                    reg.signer(ReplicaId(i)).unwrap(),
                    LaneConfig::default(),
                    LaneFaults {
                        equivocate: i == 0,
                        ..Default::default()
                    },
                )
            })
            .collect();
        reps[0].submit(vec![1]);
        let mut out = vec![];
        reps[0].maybe_propose(false, &mut out);
        let digests: BTreeSet<Digest> = out
            .iter()
            .filter_map(|o| match o {
                LaneOut::Send(_, LaneMsg::Car(c)) => Some(c.digest),
                _ => None,
            })
            .collect();
        assert_eq!(digests.len(), 2);
        pump(&reg, &mut reps, 0, out);
        for r in &reps[1..] {
            assert_eq!(r.vote_log().keys().filter(|(l, p)| l.0 == 0 && *p == 0).count(), 1);
        }
    }
}
