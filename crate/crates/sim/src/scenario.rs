//! Scenario files: TOML, unknown keys rejected.
//!
//! ```toml
//! name = "fault-free"
//!
//! [net]
//! n = 4
//! gst_ms = 0
//! delay = { dist = "fixed", ms = 50 }
//! pre_gst_delay = { dist = "uniform", min_ms = 50, max_ms = 500 }
//!
//! [[faults]]
//! replica = 3
//! behavior = { kind = "crash", at_ms = 1000 }
//!
//! [workload]
//! rate_per_lane = 20.0
//! duplicate_fraction = 0.1
//!
//! [consensus]
//! pipelined = true
//! timeout_ms = 2000
//!
//! [run]
//! duration_ms = 10000
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tipcut_core::state_machine::{Genesis, GenesisAccount};
use tipcut_core::types::Address;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub net: NetSection,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub genesis: GenesisSection,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default)]
    pub consensus: ConsensusSection,
    #[serde(default)]
    pub lanes: LaneSection,
    #[serde(default)]
    pub execution: ExecutionSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub n: usize,
    /// Defaults to `(n − 1) / 3`; `n = 3f + 1` is required.
    pub f: Option<usize>,
    #[serde(default)]
    pub gst_ms: u64,
    pub delay: DelayModel,
    /// Delay before GST; defaults to uniform up to 10× the post-GST bound.
    pub pre_gst_delay: Option<DelayModel>,
    /// Permit more than `f` faulty replicas (negative tests).
    #[serde(default)]
    pub allow_excess_faults: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    Fixed { ms: u64 },
    Uniform { min_ms: u64, max_ms: u64 },
}

impl DelayModel {
    pub fn max_ms(&self) -> u64 {
        match *self {
            DelayModel::Fixed { ms } => ms,
            DelayModel::Uniform { max_ms, .. } => max_ms,
        }
    }

    pub fn median_ms(&self) -> f64 {
        match *self {
            DelayModel::Fixed { ms } => ms as f64,
            DelayModel::Uniform { min_ms, max_ms } => (min_ms + max_ms) as f64 / 2.0,
        }
    }

    fn check(&self, what: &str) -> Result<(), ScenarioError> {
        if let DelayModel::Uniform { min_ms, max_ms } = self {
            if min_ms > max_ms {
                return invalid(format!("{what}: min_ms {min_ms} > max_ms {max_ms}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub replica: u32,
    pub behavior: Behavior,
    /// Active interval `[from_ms, to_ms)`; always active when absent.
    /// Ignored for crashes.
    pub window: Option<[u64; 2]>,
}

impl FaultSpec {
    pub fn active_at(&self, now_ms: u64) -> bool {
        self.window.is_none_or(|[a, b]| now_ms >= a && now_ms < b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Behavior {
    Crash {
        at_ms: u64,
    },
    /// Never propose in the listed views (all views when absent).
    SilentLeader {
        views: Option<Vec<u64>>,
    },
    EquivocateLane,
    WithholdBatch,
    WrongStateRoot {
        bias: u64,
    },
    OmitCertifiedTip,
    EquivocateCut,
}

impl Behavior {
    pub fn tag(&self) -> &'static str {
        match self {
            Behavior::Crash { .. } => "crash",
            Behavior::SilentLeader { .. } => "silent_leader",
            Behavior::EquivocateLane => "equivocate_lane",
            Behavior::WithholdBatch => "withhold_batch",
            Behavior::WrongStateRoot { .. } => "wrong_state_root",
            Behavior::OmitCertifiedTip => "omit_certified_tip",
            Behavior::EquivocateCut => "equivocate_cut",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenesisSection {
    /// Genesis TOML file, relative to the scenario file. Overrides the
    /// generated allocation.
    pub path: Option<String>,
    #[serde(default = "default_accounts")]
    pub accounts: u64,
    #[serde(default = "default_balance")]
    pub balance: String,
}

fn default_accounts() -> u64 {
    64
}

fn default_balance() -> String {
    "1000000000000".into()
}

impl Default for GenesisSection {
    fn default() -> Self {
        Self {
            path: None,
            accounts: default_accounts(),
            balance: default_balance(),
        }
    }
}

/// Account `i` of the generated allocation.
pub fn account(i: u64) -> Address {
    Address::from_u64(0x1000 + i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    /// Transactions per second submitted to each lane.
    #[serde(default = "default_rate")]
    pub rate_per_lane: f64,
    /// Stop submitting after this time; defaults to the run duration.
    pub duration_ms: Option<u64>,
    /// Fraction of transactions also submitted to the next lane.
    #[serde(default)]
    pub duplicate_fraction: f64,
    #[serde(default)]
    pub mix: TxMix,
    /// Distinct senders; capped by the genesis account count.
    #[serde(default = "default_senders")]
    pub senders: u64,
    /// Storage keys touched by contract calls. Fewer keys, more conflicts.
    #[serde(default = "default_hot_keys")]
    pub hot_keys: u64,
}

fn default_rate() -> f64 {
    20.0
}

fn default_senders() -> u64 {
    32
}

fn default_hot_keys() -> u64 {
    8
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            rate_per_lane: default_rate(),
            duration_ms: None,
            duplicate_fraction: 0.0,
            mix: TxMix::default(),
            senders: default_senders(),
            hot_keys: default_hot_keys(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxMix {
    pub transfer: u32,
    pub contract: u32,
    pub create: u32,
}

impl Default for TxMix {
    fn default() -> Self {
        Self {
            transfer: 6,
            contract: 3,
            create: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusSection {
    #[serde(default = "yes")]
    pub pipelined: bool,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "two")]
    pub backoff_factor: u32,
    /// Wait for the last commit votes before confirming; defaults to the
    /// post-GST delay bound.
    pub confirm_grace_ms: Option<u64>,
    /// Defaults to twice the post-GST delay bound.
    pub omission_grace_ms: Option<u64>,
    /// Per-replica stake; equal when absent.
    pub stakes: Option<Vec<u64>>,
    pub max_slots: Option<u64>,
    /// Probability that a leader skips view 0 of a slot.
    #[serde(default)]
    pub missed_slot_rate: f64,
}

fn yes() -> bool {
    true
}

fn two() -> u32 {
    2
}

fn default_timeout() -> u64 {
    2000
}

impl Default for ConsensusSection {
    fn default() -> Self {
        Self {
            pipelined: true,
            timeout_ms: default_timeout(),
            backoff_factor: 2,
            confirm_grace_ms: None,
            omission_grace_ms: None,
            stakes: None,
            max_slots: None,
            missed_slot_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneSection {
    #[serde(default = "default_batch_cap")]
    pub batch_cap: usize,
    #[serde(default = "default_fetch_timeout")]
    pub fetch_timeout_ms: u64,
}

fn default_batch_cap() -> usize {
    512
}

fn default_fetch_timeout() -> u64 {
    500
}

impl Default for LaneSection {
    fn default() -> Self {
        Self {
            batch_cap: default_batch_cap(),
            fetch_timeout_ms: default_fetch_timeout(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionSection {
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_retry")]
    pub retry_budget: usize,
}

fn default_workers() -> usize {
    4
}

fn default_retry() -> usize {
    tipcut_core::executor::DEFAULT_RETRY_BUDGET
}

impl Default for ExecutionSection {
    fn default() -> Self {
        Self {
            workers: default_workers(),
            retry_budget: default_retry(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_duration")]
    pub duration_ms: u64,
}

fn default_duration() -> u64 {
    10_000
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            duration_ms: default_duration(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
    #[serde(default)]
    pub trace: bool,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = toml::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(path.to_path_buf(), e))?;
        let mut sc = Self::from_toml(&text)?;
        sc.base_dir = path.parent().map(Path::to_path_buf);
        Ok(sc)
    }

    /// Minimal fault-free scenario for `n` replicas with a fixed delay.
    pub fn basic(n: usize, delay_ms: u64) -> Self {
        Self {
            name: String::new(),
            net: NetSection {
                n,
                f: None,
                gst_ms: 0,
                delay: DelayModel::Fixed { ms: delay_ms },
                pre_gst_delay: None,
                allow_excess_faults: false,
            },
            faults: vec![],
            genesis: GenesisSection::default(),
            workload: WorkloadSection::default(),
            consensus: ConsensusSection::default(),
            lanes: LaneSection::default(),
            execution: ExecutionSection::default(),
            run: RunSection::default(),
            output: OutputSection::default(),
            base_dir: None,
        }
    }

    pub fn f(&self) -> usize {
        self.net.f.unwrap_or((self.net.n.saturating_sub(1)) / 3)
    }

    pub fn stakes(&self) -> Vec<u64> {
        self.consensus.stakes.clone().unwrap_or_else(|| vec![1; self.net.n])
    }

    pub fn pre_gst_delay(&self) -> DelayModel {
        self.net.pre_gst_delay.unwrap_or(DelayModel::Uniform {
            min_ms: self.net.delay.max_ms(),
            max_ms: 10 * self.net.delay.max_ms(),
        })
    }

    /// Round trip: twice the median post-GST one-way delay.
    pub fn round_trip_ms(&self) -> f64 {
        2.0 * self.net.delay.median_ms()
    }

    pub fn faulty_replicas(&self) -> BTreeSet<u32> {
        self.faults.iter().map(|f| f.replica).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n = self.net.n;
        let f = self.f();
        if n < 4 || n != 3 * f + 1 {
            return invalid(format!("n = {n}, f = {f}: need n = 3f + 1 with f >= 1"));
        }
        self.net.delay.check("net.delay")?;
        self.pre_gst_delay().check("net.pre_gst_delay")?;
        if self.pre_gst_delay().max_ms() > 10 * self.net.delay.max_ms().max(1) {
            return invalid("pre-GST delay bound exceeds 10x the post-GST bound");
        }
        for fs in &self.faults {
            if fs.replica as usize >= n {
                return invalid(format!("fault on replica {} but n = {n}", fs.replica));
            }
            if let Some([a, b]) = fs.window {
                if a >= b {
                    return invalid(format!("empty fault window [{a}, {b})"));
                }
            }
        }
        let faulty = self.faulty_replicas().len();
        if faulty > f && !self.net.allow_excess_faults {
            return invalid(format!(
                "{faulty} faulty replicas exceed f = {f} (set net.allow_excess_faults for negative tests)"
            ));
        }
        if let Some(s) = &self.consensus.stakes {
            if s.len() != n || s.iter().all(|x| *x == 0) {
                return invalid("consensus.stakes needs n entries with positive total");
            }
        }
        if self.consensus.timeout_ms == 0 {
            return invalid("consensus.timeout_ms must be positive");
        }
        if !(0.0..=1.0).contains(&self.workload.duplicate_fraction) {
            return invalid("workload.duplicate_fraction must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.consensus.missed_slot_rate) {
            return invalid("consensus.missed_slot_rate must be in [0, 1)");
        }
        if self.workload.rate_per_lane < 0.0 || !self.workload.rate_per_lane.is_finite() {
            return invalid("workload.rate_per_lane must be a non-negative number");
        }
        let m = self.workload.mix;
        if m.transfer + m.contract + m.create == 0 && self.workload.rate_per_lane > 0.0 {
            return invalid("workload.mix weights are all zero");
        }
        if self.execution.workers == 0 {
            return invalid("execution.workers must be at least 1");
        }
        if self.lanes.batch_cap == 0 {
            return invalid("lanes.batch_cap must be at least 1");
        }
        if self.genesis.path.is_none() && self.genesis.accounts == 0 {
            return invalid("genesis.accounts must be at least 1");
        }
        Ok(())
    }

    /// Genesis allocation: the referenced file, or `accounts` equally
    /// funded accounts.
    pub fn genesis(&self) -> Result<Genesis, ScenarioError> {
        if let Some(p) = &self.genesis.path {
            let path = match &self.base_dir {
                Some(d) => d.join(p),
                None => PathBuf::from(p),
            };
            let text = std::fs::read_to_string(&path).map_err(|e| ScenarioError::Io(path.clone(), e))?;
            return Genesis::from_toml(&text).map_err(|e| ScenarioError::Invalid(e.to_string()));
        }
        Ok(Genesis {
            accounts: (0..self.genesis.accounts)
                .map(|i| GenesisAccount {
                    address: account(i),
                    balance: self.genesis.balance.clone(),
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        name = "x"
        [net]
        n = 4
        delay = { dist = "fixed", ms = 50 }
        [[faults]]
        replica = 2
        behavior = { kind = "silent_leader", views = [0] }
        [consensus]
        pipelined = false
    "#;

    #[test]
    fn parses_and_defaults() {
        let sc = Scenario::from_toml(SAMPLE).unwrap();
        assert_eq!(sc.f(), 1);
        assert!(!sc.consensus.pipelined);
        assert_eq!(sc.round_trip_ms(), 100.0);
        assert_eq!(sc.faults[0].behavior, Behavior::SilentLeader { views: Some(vec![0]) });
        assert_eq!(sc.pre_gst_delay(), DelayModel::Uniform { min_ms: 50, max_ms: 500 });
    }

    #[test]
    fn unknown_key_rejected() {
        let bad = SAMPLE.replace("pipelined = false", "pipelined = false\nspeed = 3");
        let err = Scenario::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("unknown field `speed`"), "{err}");
    }

    #[test]
    fn fault_budget_enforced() {
        let mut sc = Scenario::from_toml(SAMPLE).unwrap();
        sc.faults.push(FaultSpec {
            replica: 3,
            behavior: Behavior::WithholdBatch,
            window: None,
        });
        assert!(sc.validate().is_err());
        sc.net.allow_excess_faults = true;
        assert!(sc.validate().is_ok());
    }

    #[test]
    fn n_must_be_3f_plus_1() {
        let bad = SAMPLE.replace("n = 4", "n = 5");
        assert!(matches!(Scenario::from_toml(&bad), Err(ScenarioError::Invalid(_))));
    }
}
