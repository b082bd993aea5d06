//! Tip-cut BFT consensus.
//!
//! Each slot runs its own view-based two-round agreement on a [`TipCut`]:
//! Prepare votes form a PrepareQC, Commit votes on it form a CommitQC. All
//! `n` commit votes decide immediately; with only `n − f` a replica waits a
//! grace period and then sends Confirm, deciding on `2f + 1` confirms.
//!
//! Pipelined mode broadcasts votes to everyone and starts slot `s + 1` as
//! soon as slot `s` has a PrepareQC, so slots overlap. Unpipelined mode
//! sends votes to the leader, which relays each QC, and starts the next
//! slot only after commit.
//!
//! A silent or slow leader is replaced through timeouts: every replica
//! broadcasts a timeout carrying its highest PrepareQC and that QC's cut;
//! `n − f` of them form a TimeoutCert, which moves the slot to the next
//! view. The new leader must re-propose the cut of the highest QC in the
//! certificate. A replica that sees `f + 1` timeouts for its current view
//! joins them.
//!
//! Leader for `(slot, view)` is `select_leader(slot + view)`, a smooth
//! weighted round-robin over stake.

use std::collections::{BTreeMap, BTreeSet};

use crate::commitment::StateQuorumRecord;
use crate::crypto::{digest, Digest, Hasher, KeyRegistry, ReplicaId, Signature, Signer};
use crate::lane::{Car, PoACert};

pub fn qc_quorum(n: usize, f: usize) -> usize {
    n - f
}

pub fn confirm_quorum(f: usize) -> usize {
    2 * f + 1
}

pub fn timeout_quorum(n: usize, f: usize) -> usize {
    n - f
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Smooth weighted round-robin. Each step every replica's credit grows by
/// its stake; the replica with the most credit (lowest id on ties) leads
/// and pays back the total. The sequence repeats with period
/// `total / gcd(stakes)`.
#[derive(Clone, Debug)]
pub struct LeaderSchedule {
    order: Vec<ReplicaId>,
}

impl LeaderSchedule {
    pub fn new(stakes: &[u64]) -> Self {
        let g = stakes.iter().copied().filter(|s| *s > 0).fold(0, gcd);
        assert!(g > 0, "total stake must be positive");
        let w: Vec<i128> = stakes.iter().map(|s| (*s / g) as i128).collect();
        let total: i128 = w.iter().sum();
        assert!(total <= 10_000_000, "stake period too long");
        let mut credit = vec![0i128; w.len()];
        let mut order = Vec::with_capacity(total as usize);
        for _ in 0..total {
            for (c, wi) in credit.iter_mut().zip(&w) {
                *c += wi;
            }
            let (best, _) = credit
                .iter()
                .enumerate()
                .fold((0, i128::MIN), |acc, (i, c)| if *c > acc.1 { (i, *c) } else { acc });
            credit[best] -= total;
            order.push(ReplicaId(best as u32));
        }
        Self { order }
    }

    pub fn leader(&self, round: u64) -> ReplicaId {
        self.order[(round % self.order.len() as u64) as usize]
    }

    pub fn period(&self) -> usize {
        self.order.len()
    }
}

pub fn select_leader(round: u64, stakes: &[u64]) -> ReplicaId {
    LeaderSchedule::new(stakes).leader(round)
}

/// One certified tip per lane (`None` until a lane has any certified car)
/// plus the state quorum records embedded by the leader.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TipCut {
    pub slot: u64,
    pub view: u64,
    pub proposer: ReplicaId,
    pub tips: Vec<Option<PoACert>>,
    pub state_records: Vec<StateQuorumRecord>,
}

impl TipCut {
    /// Covers slot, tips and records; view and proposer are excluded so a
    /// re-proposal in a later view keeps its identity.
    pub fn digest(&self) -> Digest {
        let n = self.tips.len();
        let mut h = Hasher::with_domain("tipcut/cut/v1");
        h.update(&self.slot.to_be_bytes()).update(&(n as u32).to_be_bytes());
        for t in &self.tips {
            match t {
                None => {
                    h.update(&[0]);
                }
                Some(t) => {
                    h.update(&[1])
                        .update(&t.lane.0.to_be_bytes())
                        .update(&t.pos.to_be_bytes())
                        .update(&t.car_digest.0);
                }
            }
        }
        h.update(&(self.state_records.len() as u32).to_be_bytes());
        for r in &self.state_records {
            let enc = r.encode(n);
            h.update(&(enc.len() as u32).to_be_bytes()).update(&enc);
        }
        h.finish()
    }

    pub fn tip_pos(&self, lane: usize) -> Option<u64> {
        self.tips.get(lane).and_then(|t| t.as_ref()).map(|t| t.pos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Prepare,
    Commit,
    Confirm,
}

impl Phase {
    fn tag(self) -> u8 {
        match self {
            Phase::Prepare => 1,
            Phase::Commit => 2,
            Phase::Confirm => 3,
        }
    }
}

pub fn vote_message(phase: Phase, slot: u64, view: u64, cut: &Digest) -> Digest {
    let mut h = Hasher::with_domain("tipcut/vote/v1");
    h.update(&[phase.tag()])
        .update(&slot.to_be_bytes())
        .update(&view.to_be_bytes())
        .update(&cut.0);
    h.finish()
}

fn proposal_message(slot: u64, view: u64, cut: &Digest) -> Digest {
    let mut h = Hasher::with_domain("tipcut/proposal/v1");
    h.update(&slot.to_be_bytes()).update(&view.to_be_bytes()).update(&cut.0);
    h.finish()
}

fn timeout_message(slot: u64, view: u64, high_qc_view: Option<u64>) -> Digest {
    let mut h = Hasher::with_domain("tipcut/timeout/v1");
    h.update(&slot.to_be_bytes()).update(&view.to_be_bytes());
    match high_qc_view {
        Some(v) => h.update(&[1]).update(&v.to_be_bytes()),
        None => h.update(&[0]),
    };
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vote {
    pub phase: Phase,
    pub slot: u64,
    pub view: u64,
    pub cut_digest: Digest,
    pub sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuorumCert {
    pub phase: Phase,
    pub slot: u64,
    pub view: u64,
    pub cut_digest: Digest,
    pub votes: Vec<Signature>,
}

impl QuorumCert {
    pub fn signers(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        self.votes.iter().map(|s| s.signer)
    }

    /// At least `quorum` distinct signers, all valid.
    pub fn verify(&self, reg: &KeyRegistry, quorum: usize) -> bool {
        let msg = vote_message(self.phase, self.slot, self.view, &self.cut_digest);
        let mut seen = BTreeSet::new();
        self.votes.len() >= quorum
            && self
                .votes
                .iter()
                .all(|s| seen.insert(s.signer) && reg.verify(s, &msg))
    }

    /// Signer bitmap, bit `i` = bit `7 − i % 8` of byte `i / 8`.
    pub fn signer_bitmap(&self, n: usize) -> Vec<u8> {
        let mut bm = vec![0u8; n.div_ceil(8)];
        for s in self.signers() {
            let i = s.index();
            if i < n {
                bm[i / 8] |= 0x80 >> (i % 8);
            }
        }
        bm
    }
}

/// Minimum QC size that proves a slot decided: `n` commit votes, or
/// `2f + 1` confirms.
pub fn decide_quorum(phase: Phase, n: usize, f: usize) -> Option<usize> {
    match phase {
        Phase::Commit => Some(n),
        Phase::Confirm => Some(confirm_quorum(f)),
        Phase::Prepare => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeoutMsg {
    pub slot: u64,
    pub view: u64,
    pub high_qc: Option<(QuorumCert, TipCut)>,
    pub sig: Signature,
}

impl TimeoutMsg {
    fn qc_view(&self) -> Option<u64> {
        self.high_qc.as_ref().map(|(q, _)| q.view)
    }

    pub fn verify(&self, reg: &KeyRegistry, n: usize, f: usize) -> bool {
        if !reg.verify(&self.sig, &timeout_message(self.slot, self.view, self.qc_view())) {
            return false;
        }
        match &self.high_qc {
            None => true,
            Some((qc, cut)) => {
                qc.phase == Phase::Prepare
                    && qc.slot == self.slot
                    && qc.view <= self.view
                    && cut.digest() == qc.cut_digest
                    && qc.verify(reg, qc_quorum(n, f))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeoutCert {
    pub slot: u64,
    pub view: u64,
    /// `(signature, claimed high QC view)` per signer.
    pub entries: Vec<(Signature, Option<u64>)>,
    pub high_qc: Option<(QuorumCert, TipCut)>,
}

impl TimeoutCert {
    pub fn verify(&self, reg: &KeyRegistry, n: usize, f: usize) -> bool {
        let mut seen = BTreeSet::new();
        if self.entries.len() < timeout_quorum(n, f) {
            return false;
        }
        for (sig, claim) in &self.entries {
            if !seen.insert(sig.signer)
                || !reg.verify(sig, &timeout_message(self.slot, self.view, *claim))
            {
                return false;
            }
        }
        let max_claim = self.entries.iter().filter_map(|(_, c)| *c).max();
        match (&self.high_qc, max_claim) {
            (None, None) => true,
            (Some((qc, cut)), Some(m)) => {
                qc.view == m
                    && qc.phase == Phase::Prepare
                    && qc.slot == self.slot
                    && cut.digest() == qc.cut_digest
                    && qc.verify(reg, qc_quorum(n, f))
            }
            _ => false,
        }
    }

    pub fn high_qc_view(&self) -> Option<u64> {
        self.high_qc.as_ref().map(|(q, _)| q.view)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Justify {
    Genesis,
    /// Any certificate showing slot − 1 progressed (PrepareQC or decide QC).
    Parent(QuorumCert),
    /// TimeoutCert of the previous view of the same slot.
    Timeout(TimeoutCert),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Proposal {
    pub cut: TipCut,
    pub justify: Justify,
    pub sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConsMsg {
    Proposal(Box<Proposal>),
    Vote(Vote),
    /// QC relayed by the leader in unpipelined mode.
    Qc(QuorumCert),
    Timeout(Box<TimeoutMsg>),
    Tc(Box<TimeoutCert>),
    Decide { cut: Box<TipCut>, cert: QuorumCert },
    CutRequest { slot: u64, cut_digest: Digest },
}

impl ConsMsg {
    pub fn kind(&self) -> &'static str {
        match self {
            ConsMsg::Proposal(_) => "proposal",
            ConsMsg::Vote(v) => match v.phase {
                Phase::Prepare => "prepare_vote",
                Phase::Commit => "commit_vote",
                Phase::Confirm => "confirm",
            },
            ConsMsg::Qc(_) => "qc",
            ConsMsg::Timeout(_) => "timeout",
            ConsMsg::Tc(_) => "tc",
            ConsMsg::Decide { .. } => "decide",
            ConsMsg::CutRequest { .. } => "cut_request",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConsTimer {
    View { slot: u64, view: u64 },
    Grace { slot: u64, view: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommittedCut {
    pub slot: u64,
    pub view: u64,
    pub cut: TipCut,
    pub cert: QuorumCert,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConsOut {
    Send(ReplicaId, ConsMsg),
    Timer { at_ms: u64, timer: ConsTimer },
    /// Released strictly in slot order.
    Committed(CommittedCut),
    Proposed { slot: u64, view: u64, cut_digest: Digest },
    ViewChange { slot: u64, view: u64 },
    /// A cut left a lane behind a certified tip this replica has known for
    /// at least the omission grace period.
    OmissionFlag { slot: u64, view: u64, lane: ReplicaId, cut_pos: Option<u64>, known_pos: u64 },
    Rejected { slot: u64, view: u64, reason: &'static str },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsensusConfig {
    pub n: usize,
    pub f: usize,
    pub stakes: Vec<u64>,
    pub timeout_ms: u64,
    /// Timeout multiplier per view within a slot; 1 keeps it constant.
    pub backoff_factor: u32,
    pub pipelined: bool,
    pub confirm_grace_ms: u64,
    pub omission_grace_ms: u64,
    pub max_slots: Option<u64>,
}

impl ConsensusConfig {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            f: (n - 1) / 3,
            stakes: vec![1; n],
            timeout_ms: 2000,
            backoff_factor: 2,
            pipelined: true,
            confirm_grace_ms: 100,
            omission_grace_ms: 200,
            max_slots: None,
        }
    }

    pub fn timeout_for(&self, view: u64) -> u64 {
        let factor = (self.backoff_factor.max(1) as u64).saturating_pow(view.min(32) as u32);
        self.timeout_ms.saturating_mul(factor)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConsFaults {
    /// Never propose as leader in these views (`None` = never propose).
    pub silent_leader: Option<Option<BTreeSet<u64>>>,
    /// Hold back one other lane at its parent-cut position.
    pub omit_certified_tip: bool,
    /// Send two different cuts in each led view and vote for both.
    pub equivocate_cut: bool,
    /// Skip proposing in view 0 of a slot with this probability, drawn per
    /// slot from `missed_slot_seed`. Models degraded, not Byzantine, leaders.
    pub missed_slot_rate: f64,
    pub missed_slot_seed: u64,
}

impl ConsFaults {
    fn silent_in(&self, view: u64) -> bool {
        match &self.silent_leader {
            None => false,
            Some(None) => true,
            Some(Some(views)) => views.contains(&view),
        }
    }

    fn misses_slot(&self, slot: u64, view: u64) -> bool {
        if view != 0 || self.missed_slot_rate <= 0.0 {
            return false;
        }
        let mut h = Hasher::with_domain("tipcut/missed-slot");
        h.update(&self.missed_slot_seed.to_be_bytes()).update(&slot.to_be_bytes());
        let d = h.finish();
        let x = u64::from_be_bytes(d.0[..8].try_into().expect("8 bytes"));
        (x as f64 / u64::MAX as f64) < self.missed_slot_rate
    }

    pub fn is_byzantine(&self) -> bool {
        self.silent_leader.is_some() || self.omit_certified_tip || self.equivocate_cut
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConsStats {
    pub proposals: u64,
    pub prepare_votes: u64,
    pub commit_votes: u64,
    pub confirms_sent: u64,
    pub fast_commits: u64,
    pub confirm_commits: u64,
    pub timeouts_sent: u64,
    pub view_changes: u64,
    pub omission_flags: u64,
    pub rejected: u64,
    pub decides_served: u64,
}

/// What the node knows when the engine may need to lead or vote.
pub struct Env<'a> {
    pub now_ms: u64,
    pub tips: &'a [Option<PoACert>],
    pub tip_learned_ms: &'a [u64],
    pub state_records: &'a [StateQuorumRecord],
}

#[derive(Default, Debug)]
struct SlotState {
    view: u64,
    started: bool,
    cuts: BTreeMap<Digest, TipCut>,
    proposal_seen: BTreeMap<u64, Digest>,
    voted: BTreeSet<(Phase, u64)>,
    votes: BTreeMap<(Phase, u64, Digest), BTreeMap<ReplicaId, Signature>>,
    prepare_qcs: BTreeMap<u64, QuorumCert>,
    commit_qcs: BTreeMap<u64, QuorumCert>,
    high_qc: Option<QuorumCert>,
    lock: Option<(u64, Digest)>,
    timed_out: BTreeSet<u64>,
    timeouts: BTreeMap<u64, BTreeMap<ReplicaId, TimeoutMsg>>,
    tcs: BTreeMap<u64, TimeoutCert>,
    decided: Option<(u64, Digest, QuorumCert)>,
    requested_cut: bool,
}

pub struct Consensus {
    me: ReplicaId,
    cfg: ConsensusConfig,
    signer: Signer,
    schedule: LeaderSchedule,
    faults: ConsFaults,
    slots: BTreeMap<u64, SlotState>,
    decided: BTreeMap<u64, CommittedCut>,
    next_output: u64,
    committed_tips: Vec<Option<PoACert>>,
    halted: bool,
    pub stats: ConsStats,
}

impl Consensus {
    pub fn new(me: ReplicaId, cfg: ConsensusConfig, signer: Signer, faults: ConsFaults) -> Self {
        assert_eq!(cfg.stakes.len(), cfg.n, "one stake per replica");
        let schedule = LeaderSchedule::new(&cfg.stakes);
        let n = cfg.n;
        Self {
            me,
            cfg,
            signer,
            schedule,
            faults,
            slots: BTreeMap::new(),
            decided: BTreeMap::new(),
            next_output: 0,
            committed_tips: vec![None; n],
            halted: false,
            stats: ConsStats::default(),
        }
    }

    pub fn config(&self) -> &ConsensusConfig {
        &self.cfg
    }

    pub fn leader(&self, slot: u64, view: u64) -> ReplicaId {
        self.schedule.leader(slot + view)
    }

    pub fn set_faults(&mut self, faults: ConsFaults) {
        self.faults = faults;
    }

    pub fn faults(&self) -> &ConsFaults {
        &self.faults
    }

    pub fn halt(&mut self) {
        self.halted = true;
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Slots released so far (all lower slots committed).
    pub fn committed_prefix(&self) -> u64 {
        self.next_output
    }

    pub fn current_view(&self, slot: u64) -> u64 {
        self.slots.get(&slot).map_or(0, |s| s.view)
    }

    pub fn decided_cut(&self, slot: u64) -> Option<&CommittedCut> {
        self.decided.get(&slot)
    }

    fn n(&self) -> usize {
        self.cfg.n
    }

    fn f(&self) -> usize {
        self.cfg.f
    }

    fn slot(&mut self, s: u64) -> &mut SlotState {
        self.slots.entry(s).or_default()
    }

    fn broadcast(&self, msg: ConsMsg, out: &mut Vec<ConsOut>) {
        for r in 0..self.n() as u32 {
            out.push(ConsOut::Send(ReplicaId(r), msg.clone()));
        }
    }

    /// Begin slot 0.
    pub fn start(&mut self, reg: &KeyRegistry, env: &Env, out: &mut Vec<ConsOut>) {
        self.start_slot(reg, env, 0, out);
    }

    fn start_slot(&mut self, reg: &KeyRegistry, env: &Env, s: u64, out: &mut Vec<ConsOut>) {
        if self.halted || self.cfg.max_slots.is_some_and(|m| s >= m) {
            return;
        }
        let st = self.slot(s);
        if st.started || st.decided.is_some() {
            return;
        }
        st.started = true;
        let view = st.view;
        out.push(ConsOut::Timer {
            at_ms: env.now_ms + self.cfg.timeout_for(view),
            timer: ConsTimer::View { slot: s, view },
        });
        if self.leader(s, view) == self.me {
            self.propose(reg, env, s, view, out);
        }
    }

    fn parent_justify(&self, s: u64) -> Option<Justify> {
        if s == 0 {
            return Some(Justify::Genesis);
        }
        let p = self.slots.get(&(s - 1));
        if let Some(qc) = p.and_then(|p| p.prepare_qcs.values().next_back()) {
            return Some(Justify::Parent(qc.clone()));
        }
        self.decided
            .get(&(s - 1))
            .map(|c| Justify::Parent(c.cert.clone()))
    }

    fn parent_cut(&self, s: u64, justify: &Justify) -> Option<&TipCut> {
        let Justify::Parent(qc) = justify else {
            return None;
        };
        self.slots.get(&(s - 1))?.cuts.get(&qc.cut_digest)
    }

    fn build_cut(&self, env: &Env, s: u64, view: u64, parent: Option<&TipCut>) -> TipCut {
        let n = self.n();
        let mut tips: Vec<Option<PoACert>> = Vec::with_capacity(n);
        for lane in 0..n {
            let higher = |a: Option<PoACert>, b: Option<&PoACert>| match (a, b) {
                (Some(a), Some(b)) if b.pos > a.pos => Some(b.clone()),
                (None, Some(b)) => Some(b.clone()),
                (a, _) => a,
            };
            let floor = higher(
                self.committed_tips[lane].clone(),
                parent.and_then(|p| p.tips[lane].as_ref()),
            );
            let mut best = higher(floor.clone(), env.tips.get(lane).and_then(|t| t.as_ref()));
            if self.faults.omit_certified_tip && lane == (self.me.index() + 1) % n {
                best = floor;
            }
            tips.push(best);
        }
        TipCut {
            slot: s,
            view,
            proposer: self.me,
            tips,
            state_records: env
                .state_records
                .iter()
                .filter(|r| parent.is_none_or(|p| p.state_records.iter().all(|q| q.height != r.height)))
                .cloned()
                .collect(),
        }
    }

    fn propose(&mut self, _reg: &KeyRegistry, env: &Env, s: u64, view: u64, out: &mut Vec<ConsOut>) {
        if self.halted || self.faults.silent_in(view) || self.faults.misses_slot(s, view) {
            return;
        }
        let justify = if view == 0 {
            match self.parent_justify(s) {
                Some(j) => j,
                None => return,
            }
        } else {
            match self.slots.get(&s).and_then(|st| st.tcs.get(&(view - 1))) {
                Some(tc) => Justify::Timeout(tc.clone()),
                None => return,
            }
        };
        let mut cut = match &justify {
            Justify::Timeout(TimeoutCert {
                high_qc: Some((_, c)),
                ..
            }) => c.clone(),
            _ => {
                let parent = self.parent_cut(s, &justify).cloned();
                self.build_cut(env, s, view, parent.as_ref())
            }
        };
        cut.view = view;
        cut.proposer = self.me;
        let d = cut.digest();
        self.stats.proposals += 1;
        out.push(ConsOut::Proposed {
            slot: s,
            view,
            cut_digest: d,
        });
        let sig = self.signer.sign(&proposal_message(s, view, &d));
        let main = Proposal {
            cut: cut.clone(),
            justify: justify.clone(),
            sig,
        };
        if self.faults.equivocate_cut {
            let mut alt = cut.clone();
            alt.state_records.clear();
            if let Some(lane) = (0..self.n()).find(|l| alt.tips[*l] != self.committed_tips[*l]) {
                alt.tips[lane] = self.committed_tips[lane].clone();
            }
            let ad = alt.digest();
            let alt = Proposal {
                sig: self.signer.sign(&proposal_message(s, view, &ad)),
                cut: alt,
                justify,
            };
            // Vote for both; each half of the replicas sees one of them.
            for p in [&main, &alt] {
                let msg = ConsMsg::Vote(self.make_vote(Phase::Prepare, s, view, p.cut.digest()));
                self.send_vote(s, view, msg, out);
            }
            let others: Vec<u32> = (0..self.n() as u32).filter(|r| *r != self.me.0).collect();
            let half = others.len() / 2;
            out.push(ConsOut::Send(self.me, ConsMsg::Proposal(Box::new(main.clone()))));
            for (k, r) in others.iter().enumerate() {
                let p = if k < half { &alt } else { &main };
                out.push(ConsOut::Send(ReplicaId(*r), ConsMsg::Proposal(Box::new(p.clone()))));
            }
            return;
        }
        self.broadcast(ConsMsg::Proposal(Box::new(main)), out);
    }

    fn make_vote(&self, phase: Phase, slot: u64, view: u64, d: Digest) -> Vote {
        Vote {
            phase,
            slot,
            view,
            cut_digest: d,
            sig: self.signer.sign(&vote_message(phase, slot, view, &d)),
        }
    }

    /// All-to-all when pipelined, to the leader otherwise.
    fn send_vote(&self, slot: u64, view: u64, msg: ConsMsg, out: &mut Vec<ConsOut>) {
        if self.cfg.pipelined {
            self.broadcast(msg, out);
        } else {
            out.push(ConsOut::Send(self.leader(slot, view), msg));
        }
    }

    pub fn on_message(
        &mut self,
        reg: &KeyRegistry,
        env: &Env,
        from: ReplicaId,
        msg: ConsMsg,
        out: &mut Vec<ConsOut>,
    ) {
        match msg {
            ConsMsg::Proposal(p) => self.on_proposal(reg, env, from, *p, out),
            ConsMsg::Vote(v) => self.on_vote(reg, env, from, v, out),
            ConsMsg::Qc(qc) => self.on_relayed_qc(reg, env, qc, out),
            ConsMsg::Timeout(t) => self.on_timeout_msg(reg, env, from, *t, out),
            ConsMsg::Tc(tc) => {
                if tc.verify(reg, self.n(), self.f()) {
                    self.on_tc(reg, env, *tc, out);
                }
            }
            ConsMsg::Decide { cut, cert } => self.on_decide_msg(reg, env, *cut, cert, out),
            ConsMsg::CutRequest { slot, cut_digest } => {
                if let Some(c) = self.decided.get(&slot) {
                    if c.cut.digest() == cut_digest {
                        out.push(ConsOut::Send(
                            from,
                            ConsMsg::Decide {
                                cut: Box::new(c.cut.clone()),
                                cert: c.cert.clone(),
                            },
                        ));
                        self.stats.decides_served += 1;
                    }
                }
            }
        }
    }

    fn reject(&mut self, s: u64, v: u64, reason: &'static str, out: &mut Vec<ConsOut>) {
        self.stats.rejected += 1;
        out.push(ConsOut::Rejected {
            slot: s,
            view: v,
            reason,
        });
    }

    fn valid_parent_cert(&self, reg: &KeyRegistry, s: u64, qc: &QuorumCert) -> bool {
        let quorum = match qc.phase {
            Phase::Prepare => Some(qc_quorum(self.n(), self.f())),
            p => decide_quorum(p, self.n(), self.f()),
        };
        qc.slot + 1 == s && quorum.is_some_and(|q| qc.verify(reg, q))
    }

    fn validate_cut(&self, reg: &KeyRegistry, cut: &TipCut) -> Result<(), &'static str> {
        if cut.tips.len() != self.n() {
            return Err("wrong lane count");
        }
        for (lane, t) in cut.tips.iter().enumerate() {
            if let Some(t) = t {
                if t.lane.index() != lane || !t.verify(reg, self.f()) {
                    return Err("invalid poa");
                }
            }
        }
        let mut heights = BTreeSet::new();
        for r in &cut.state_records {
            if !heights.insert(r.height) || !r.verify(reg, &self.cfg.stakes) {
                return Err("invalid state record");
            }
        }
        Ok(())
    }

    fn on_proposal(
        &mut self,
        reg: &KeyRegistry,
        env: &Env,
        from: ReplicaId,
        p: Proposal,
        out: &mut Vec<ConsOut>,
    ) {
        let (s, v) = (p.cut.slot, p.cut.view);
        if self.decided.contains_key(&s) {
            return;
        }
        let d = p.cut.digest();
        if from != p.cut.proposer
            || p.sig.signer != from
            || self.leader(s, v) != from
            || !reg.verify(&p.sig, &proposal_message(s, v, &d))
        {
            return self.reject(s, v, "bad proposer", out);
        }
        // Justification first: it may start the slot or advance the view.
        match &p.justify {
            Justify::Genesis => {
                if s != 0 || v != 0 {
                    return self.reject(s, v, "bad justify", out);
                }
            }
            Justify::Parent(qc) => {
                if v != 0 || !self.valid_parent_cert(reg, s, qc) {
                    return self.reject(s, v, "bad justify", out);
                }
                if qc.phase == Phase::Prepare {
                    self.on_prepare_qc(reg, env, qc.clone(), out);
                }
                self.start_slot(reg, env, s, out);
            }
            Justify::Timeout(tc) => {
                if v == 0 || tc.slot != s || tc.view + 1 != v || !tc.verify(reg, self.n(), self.f()) {
                    return self.reject(s, v, "bad justify", out);
                }
                self.on_tc(reg, env, tc.clone(), out);
            }
        }
        if self.decided.contains_key(&s) {
            return;
        }
        let st = self.slots.entry(s).or_default();
        if st.view != v {
            return;
        }
        st.cuts.entry(d).or_insert_with(|| p.cut.clone());
        if st.proposal_seen.contains_key(&v)
            || st.voted.contains(&(Phase::Prepare, v))
            || st.timed_out.contains(&v)
        {
            return;
        }
        st.proposal_seen.insert(v, d);
        if let Err(reason) = self.validate_cut(reg, &p.cut) {
            return self.reject(s, v, reason, out);
        }
        if let Justify::Timeout(tc) = &p.justify {
            if let Some((qc, _)) = &tc.high_qc {
                if qc.cut_digest != d {
                    return self.reject(s, v, "ignores high qc", out);
                }
            }
            let lock = self.slots[&s].lock;
            if let Some((lv, ld)) = lock {
                if ld != d && tc.high_qc_view().is_none_or(|hv| hv < lv) {
                    return self.reject(s, v, "conflicts with lock", out);
                }
            }
        }
        if let Some(parent) = self.parent_cut(s, &p.justify) {
            let regress = (0..self.n()).any(|l| {
                parent.tip_pos(l).is_some_and(|pp| p.cut.tip_pos(l).is_none_or(|cp| cp < pp))
            });
            if regress {
                return self.reject(s, v, "non-monotonic tip", out);
            }
        }
        for lane in 0..self.n() {
            let known = env.tips.get(lane).and_then(|t| t.as_ref()).map(|t| t.pos);
            let learned = env.tip_learned_ms.get(lane).copied().unwrap_or(0);
            if let Some(kp) = known {
                let cut_pos = p.cut.tip_pos(lane);
                if cut_pos.is_none_or(|c| c < kp)
                    && learned + self.cfg.omission_grace_ms <= env.now_ms
                {
                    self.stats.omission_flags += 1;
                    out.push(ConsOut::OmissionFlag {
                        slot: s,
                        view: v,
                        lane: ReplicaId(lane as u32),
                        cut_pos,
                        known_pos: kp,
                    });
                }
            }
        }
        if self.halted {
            return;
        }
        self.slot(s).voted.insert((Phase::Prepare, v));
        self.stats.prepare_votes += 1;
        let vote = ConsMsg::Vote(self.make_vote(Phase::Prepare, s, v, d));
        self.send_vote(s, v, vote, out);
    }

    fn on_vote(
        &mut self,
        reg: &KeyRegistry,
        env: &Env,
        from: ReplicaId,
        vote: Vote,
        out: &mut Vec<ConsOut>,
    ) {
        let (s, v, d, phase) = (vote.slot, vote.view, vote.cut_digest, vote.phase);
        if vote.sig.signer != from
            || !reg.verify(&vote.sig, &vote_message(phase, s, v, &d))
            || self.decided.contains_key(&s)
        {
            return;
        }
        let (n, f) = (self.n(), self.f());
        let st = self.slot(s);
        let set = st.votes.entry((phase, v, d)).or_default();
        set.entry(from).or_insert(vote.sig);
        let count = set.len();
        let sigs: Vec<Signature> = set.values().copied().collect();
        let qc = QuorumCert {
            phase,
            slot: s,
            view: v,
            cut_digest: d,
            votes: sigs,
        };
        match phase {
            Phase::Prepare => {
                if count >= qc_quorum(n, f) && !st.prepare_qcs.contains_key(&v) {
                    if !self.cfg.pipelined {
                        self.broadcast(ConsMsg::Qc(qc.clone()), out);
                    }
                    self.on_prepare_qc(reg, env, qc, out);
                }
            }
            Phase::Commit => {
                if count == n {
                    self.stats.fast_commits += 1;
                    self.decide(reg, env, s, v, d, qc, out);
                } else if count >= qc_quorum(n, f) && !st.commit_qcs.contains_key(&v) {
                    st.commit_qcs.insert(v, qc);
                    out.push(ConsOut::Timer {
                        at_ms: env.now_ms + self.cfg.confirm_grace_ms,
                        timer: ConsTimer::Grace { slot: s, view: v },
                    });
                }
            }
            Phase::Confirm => {
                if count >= confirm_quorum(f) {
                    self.stats.confirm_commits += 1;
                    self.decide(reg, env, s, v, d, qc, out);
                }
            }
        }
    }

    fn on_relayed_qc(&mut self, reg: &KeyRegistry, env: &Env, qc: QuorumCert, out: &mut Vec<ConsOut>) {
        if self.decided.contains_key(&qc.slot) || !qc.verify(reg, qc_quorum(self.n(), self.f())) {
            return;
        }
        match qc.phase {
            Phase::Prepare => self.on_prepare_qc(reg, env, qc, out),
            Phase::Commit => self.send_confirm(qc.slot, qc.view, qc.cut_digest, out),
            Phase::Confirm => {}
        }
    }

    fn on_prepare_qc(&mut self, reg: &KeyRegistry, env: &Env, qc: QuorumCert, out: &mut Vec<ConsOut>) {
        let (s, v, d) = (qc.slot, qc.view, qc.cut_digest);
        let halted = self.halted;
        let st = self.slot(s);
        if st.prepare_qcs.contains_key(&v) {
            return;
        }
        st.prepare_qcs.insert(v, qc.clone());
        if st.high_qc.as_ref().is_none_or(|h| h.view < v) {
            st.high_qc = Some(qc.clone());
        }
        if st.lock.is_none_or(|(lv, _)| lv < v) {
            st.lock = Some((v, d));
        }
        let can_vote = st.decided.is_none()
            && st.view == v
            && !st.timed_out.contains(&v)
            && !st.voted.contains(&(Phase::Commit, v))
            && !halted;
        if can_vote {
            st.voted.insert((Phase::Commit, v));
            self.stats.commit_votes += 1;
            let vote = ConsMsg::Vote(self.make_vote(Phase::Commit, s, v, d));
            self.send_vote(s, v, vote, out);
        }
        if self.cfg.pipelined {
            self.start_slot(reg, env, s + 1, out);
        }
    }

    fn send_confirm(&mut self, s: u64, v: u64, d: Digest, out: &mut Vec<ConsOut>) {
        if self.halted {
            return;
        }
        let st = self.slot(s);
        if st.decided.is_some() || st.voted.contains(&(Phase::Confirm, v)) || st.timed_out.contains(&v) {
            return;
        }
        st.voted.insert((Phase::Confirm, v));
        self.stats.confirms_sent += 1;
        let vote = ConsMsg::Vote(self.make_vote(Phase::Confirm, s, v, d));
        self.send_vote(s, v, vote, out);
    }

    #[allow(clippy::too_many_arguments)]
    fn decide(
        &mut self,
        reg: &KeyRegistry,
        env: &Env,
        s: u64,
        v: u64,
        d: Digest,
        cert: QuorumCert,
        out: &mut Vec<ConsOut>,
    ) {
        let st = self.slot(s);
        if st.decided.is_some() {
            return;
        }
        st.decided = Some((v, d, cert.clone()));
        let cut = st.cuts.get(&d).cloned();
        match cut {
            Some(cut) => {
                if !self.cfg.pipelined && self.leader(s, v) == self.me {
                    for r in 0..self.n() as u32 {
                        if r != self.me.0 {
                            out.push(ConsOut::Send(
                                ReplicaId(r),
                                ConsMsg::Decide {
                                    cut: Box::new(cut.clone()),
                                    cert: cert.clone(),
                                },
                            ));
                        }
                    }
                }
                self.record_decision(s, v, cut, cert, out);
            }
            None => {
                let st = self.slot(s);
                if !st.requested_cut {
                    st.requested_cut = true;
                    for r in 0..self.n() as u32 {
                        if r != self.me.0 {
                            out.push(ConsOut::Send(
                                ReplicaId(r),
                                ConsMsg::CutRequest {
                                    slot: s,
                                    cut_digest: d,
                                },
                            ));
                        }
                    }
                }
            }
        }
        self.start_slot(reg, env, s + 1, out);
    }

    fn record_decision(&mut self, s: u64, v: u64, cut: TipCut, cert: QuorumCert, out: &mut Vec<ConsOut>) {
        self.decided.insert(
            s,
            CommittedCut {
                slot: s,
                view: v,
                cut,
                cert,
            },
        );
        while let Some(c) = self.decided.get(&self.next_output) {
            for (lane, t) in c.cut.tips.iter().enumerate() {
                if let Some(t) = t {
                    if self.committed_tips[lane].as_ref().is_none_or(|b| t.pos > b.pos) {
                        self.committed_tips[lane] = Some(t.clone());
                    }
                }
            }
            out.push(ConsOut::Committed(c.clone()));
            self.next_output += 1;
        }
        // Old slot state is no longer needed once released.
        let keep_from = self.next_output.saturating_sub(2);
        self.slots.retain(|k, _| *k >= keep_from);
    }

    fn on_decide_msg(
        &mut self,
        reg: &KeyRegistry,
        env: &Env,
        cut: TipCut,
        cert: QuorumCert,
        out: &mut Vec<ConsOut>,
    ) {
        let s = cert.slot;
        if self.decided.contains_key(&s) {
            return;
        }
        let Some(q) = decide_quorum(cert.phase, self.n(), self.f()) else {
            return;
        };
        let d = cut.digest();
        if cut.slot != s || d != cert.cut_digest || !cert.verify(reg, q) {
            return;
        }
        let st = self.slot(s);
        st.cuts.insert(d, cut.clone());
        match st.decided.clone() {
            Some((v, dd, c)) if dd == d => {
                // Decided earlier without the cut; release it now.
                self.record_decision(s, v, cut, c, out);
            }
            Some(_) => {}
            None => {
                let v = cert.view;
                self.decide(reg, env, s, v, d, cert, out);
            }
        }
    }

    fn on_timeout_msg(
        &mut self,
        reg: &KeyRegistry,
        env: &Env,
        from: ReplicaId,
        t: TimeoutMsg,
        out: &mut Vec<ConsOut>,
    ) {
        let s = t.slot;
        if let Some(c) = self.decided.get(&s) {
            // Catch-up for a replica stuck in a decided slot.
            out.push(ConsOut::Send(
                from,
                ConsMsg::Decide {
                    cut: Box::new(c.cut.clone()),
                    cert: c.cert.clone(),
                },
            ));
            self.stats.decides_served += 1;
            return;
        }
        if t.sig.signer != from || !t.verify(reg, self.n(), self.f()) {
            return;
        }
        let (n, f) = (self.n(), self.f());
        let st = self.slot(s);
        if t.view + 1 < st.view {
            return;
        }
        if let Some((qc, cut)) = &t.high_qc {
            st.cuts.entry(qc.cut_digest).or_insert_with(|| cut.clone());
        }
        let view = t.view;
        let set = st.timeouts.entry(view).or_default();
        set.entry(from).or_insert(t);
        let count = set.len();
        if count > f && view >= st.view && !st.timed_out.contains(&view) {
            if view > st.view {
                // Not justified to enter yet; the TC will follow.
            } else {
                self.send_timeout(s, view, out);
            }
        }
        let st = self.slot(s);
        if count >= timeout_quorum(n, f) && !st.tcs.contains_key(&view) {
            let set = &st.timeouts[&view];
            let entries: Vec<(Signature, Option<u64>)> =
                set.values().map(|m| (m.sig, m.qc_view())).collect();
            let high_qc = set
                .values()
                .filter_map(|m| m.high_qc.clone())
                .max_by_key(|(q, _)| q.view);
            let tc = TimeoutCert {
                slot: s,
                view,
                entries,
                high_qc,
            };
            for r in 0..n as u32 {
                if r != self.me.0 {
                    out.push(ConsOut::Send(ReplicaId(r), ConsMsg::Tc(Box::new(tc.clone()))));
                }
            }
            self.on_tc(reg, env, tc, out);
        }
    }

    fn send_timeout(&mut self, s: u64, view: u64, out: &mut Vec<ConsOut>) {
        let st = self.slot(s);
        if !st.timed_out.insert(view) {
            return;
        }
        let high_qc = st.high_qc.as_ref().and_then(|q| {
            let cut = st.cuts.get(&q.cut_digest)?;
            Some((q.clone(), cut.clone()))
        });
        let claim = high_qc.as_ref().map(|(q, _)| q.view);
        let sig = self.signer.sign(&timeout_message(s, view, claim));
        self.stats.timeouts_sent += 1;
        self.broadcast(
            ConsMsg::Timeout(Box::new(TimeoutMsg {
                slot: s,
                view,
                high_qc,
                sig,
            })),
            out,
        );
    }

    fn on_tc(&mut self, reg: &KeyRegistry, env: &Env, tc: TimeoutCert, out: &mut Vec<ConsOut>) {
        let s = tc.slot;
        if self.decided.contains_key(&s) {
            return;
        }
        let next = tc.view + 1;
        let st = self.slot(s);
        if let Some((qc, cut)) = &tc.high_qc {
            st.cuts.entry(qc.cut_digest).or_insert_with(|| cut.clone());
            if st.high_qc.as_ref().is_none_or(|h| h.view < qc.view) {
                st.high_qc = Some(qc.clone());
            }
        }
        st.tcs.entry(tc.view).or_insert(tc);
        if st.view >= next {
            return;
        }
        st.view = next;
        let started = st.started;
        self.stats.view_changes += 1;
        out.push(ConsOut::ViewChange { slot: s, view: next });
        if started && !self.halted {
            out.push(ConsOut::Timer {
                at_ms: env.now_ms + self.cfg.timeout_for(next),
                timer: ConsTimer::View { slot: s, view: next },
            });
            if self.leader(s, next) == self.me {
                self.propose(reg, env, s, next, out);
            }
        }
    }

    pub fn on_timer(&mut self, _reg: &KeyRegistry, _env: &Env, timer: ConsTimer, out: &mut Vec<ConsOut>) {
        if self.halted {
            return;
        }
        match timer {
            ConsTimer::View { slot, view } => {
                let Some(st) = self.slots.get(&slot) else {
                    return;
                };
                if st.decided.is_some() || st.view != view {
                    return;
                }
                self.send_timeout(slot, view, out);
            }
            ConsTimer::Grace { slot, view } => {
                let Some(st) = self.slots.get(&slot) else {
                    return;
                };
                if st.decided.is_some() {
                    return;
                }
                let Some(qc) = st.commit_qcs.get(&view).cloned() else {
                    return;
                };
                if self.cfg.pipelined {
                    self.send_confirm(slot, view, qc.cut_digest, out);
                } else if self.leader(slot, view) == self.me {
                    self.broadcast(ConsMsg::Qc(qc), out);
                }
            }
        }
    }
}

/// A linearized block ready for execution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub slot: u64,
    /// `(lane, pos, digest)` of every car included, in order.
    pub cars: Vec<(ReplicaId, u64, Digest)>,
    pub txs: Vec<Vec<u8>>,
    /// Digests skipped because an earlier copy was already linearized.
    pub duplicates: Vec<Digest>,
    pub state_records: Vec<StateQuorumRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LinearizeStats {
    /// Cut tips below the lane's already-committed position.
    pub regressions: u64,
    /// Newly committed cars that do not extend the previously committed car.
    pub forks: u64,
    pub duplicates: u64,
}

/// Expands committed cuts into blocks. Each lane contributes the cars
/// strictly above its highest committed position up to the cut's tip;
/// a tip at or below that position contributes nothing.
#[derive(Clone, Debug)]
pub struct Linearizer {
    effective: Vec<Option<(u64, Digest)>>,
    seen: BTreeSet<Digest>,
    next_height: u64,
    pub stats: LinearizeStats,
}

impl Linearizer {
    pub fn new(n: usize) -> Self {
        Self {
            effective: vec![None; n],
            seen: BTreeSet::new(),
            next_height: 1,
            stats: LinearizeStats::default(),
        }
    }

    pub fn next_height(&self) -> u64 {
        self.next_height
    }

    /// Highest committed `(pos, digest)` per lane.
    pub fn effective(&self) -> &[Option<(u64, Digest)>] {
        &self.effective
    }

    /// Lanes the cut advances: `(tip, first new pos)`.
    pub fn ranges<'a>(&self, cut: &'a TipCut) -> Vec<(&'a PoACert, u64)> {
        cut.tips
            .iter()
            .enumerate()
            .filter_map(|(lane, t)| {
                let t = t.as_ref()?;
                let from = self.effective[lane].map_or(0, |(p, _)| p + 1);
                (t.pos >= from).then_some((t, from))
            })
            .collect()
    }

    /// Linearize the next cut. `cars(tip, from)` must return the cars
    /// `from..=tip.pos` in position order, or `None` if any is missing, in
    /// which case nothing changes.
    pub fn linearize<F>(&mut self, cut: &TipCut, mut cars: F) -> Option<Block>
    where
        F: FnMut(&PoACert, u64) -> Option<Vec<Car>>,
    {
        let mut per_lane = Vec::new();
        for (tip, from) in self.ranges(cut) {
            let list = cars(tip, from)?;
            if list.first().map(|c| c.pos) != Some(from) || list.last().map(|c| c.digest) != Some(tip.car_digest) {
                return None;
            }
            per_lane.push((tip.lane, list));
        }
        for (lane, t) in cut.tips.iter().enumerate() {
            if let (Some(t), Some((p, _))) = (t, self.effective[lane]) {
                if t.pos < p {
                    self.stats.regressions += 1;
                }
            }
        }
        let height = self.next_height;
        let mut block = Block {
            height,
            slot: cut.slot,
            cars: Vec::new(),
            txs: Vec::new(),
            duplicates: Vec::new(),
            state_records: cut
                .state_records
                .iter()
                .cloned()
                .map(|mut r| {
                    r.committed_at = Some(height);
                    r
                })
                .collect(),
        };
        for (lane, list) in per_lane {
            if let (Some(first), Some((_, prev))) = (list.first(), self.effective[lane.index()]) {
                if first.parent != prev {
                    self.stats.forks += 1;
                }
            }
            for car in &list {
                block.cars.push((car.lane, car.pos, car.digest));
                for tx in &car.batch {
                    let d = digest(tx);
                    if self.seen.insert(d) {
                        block.txs.push(tx.clone());
                    } else {
                        self.stats.duplicates += 1;
                        block.duplicates.push(d);
                    }
                }
            }
            let last = list.last().expect("non-empty range");
            self.effective[lane.index()] = Some((last.pos, last.digest));
        }
        self.next_height += 1;
        Some(block)
    }
}
