//! Structured trace: one JSON object per line, `{"t": <ms>, "ev": <kind>, ...}`.

use serde::{Deserialize, Serialize};
use tipcut_core::crypto::{Digest, Hasher};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum Event {
    Start {
        n: usize,
        f: usize,
        seed: u64,
        pipelined: bool,
        round_trip_ms: f64,
        faulty: Vec<u32>,
        /// Replicas whose leadership counts as correct.
        byzantine_leaders: Vec<u32>,
    },
    Crash {
        r: u32,
    },
    Certified {
        lane: u32,
        pos: u64,
        car: String,
    },
    Proposed {
        r: u32,
        slot: u64,
        view: u64,
        cut: String,
    },
    ViewChange {
        r: u32,
        slot: u64,
        view: u64,
    },
    Committed {
        r: u32,
        slot: u64,
        view: u64,
        cut: String,
        leader: u32,
        /// Certified tip position per lane (`null` for none).
        tips: Vec<Option<u64>>,
        /// `commit` (all n votes) or `confirm`.
        path: String,
    },
    Omission {
        r: u32,
        slot: u64,
        view: u64,
        lane: u32,
    },
    Executed {
        r: u32,
        height: u64,
        slot: u64,
        /// `(lane, pos)` of each car, in linearized order.
        cars: Vec<(u32, u64)>,
        /// Digests of executed transactions, in order.
        txs: Vec<String>,
        duplicates: u64,
        commitment: String,
        executions: u64,
        aborts: u64,
        fallback: bool,
    },
    StateCommitted {
        r: u32,
        height: u64,
        at: u64,
        lag: u64,
        matches_local: bool,
    },
    Halted {
        r: u32,
        height: u64,
        diverging_stake: u64,
        total_stake: u64,
    },
    Violation {
        r: Option<u32>,
        what: String,
    },
    NodeStats {
        r: u32,
        fetch_requests: u64,
        cars_fetched: u64,
        lane_equivocations_seen: u64,
        view_changes: u64,
        timeouts_sent: u64,
        fast_commits: u64,
        confirm_commits: u64,
        omission_flags: u64,
        rejected_proposals: u64,
        linearize_regressions: u64,
        linearize_forks: u64,
        occ_aborts: u64,
        occ_fallbacks: u64,
        cold_reads: u64,
        invalid_txs: u64,
        wal_bytes: u64,
    },
    End {
        messages: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: u64,
    #[serde(flatten)]
    pub ev: Event,
}

impl Record {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub records: Vec<Record>,
}

impl Trace {
    pub fn push(&mut self, t: u64, ev: Event) {
        self.records.push(Record { t, ev });
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    /// SHA-256 over the JSON-lines bytes.
    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        for r in &self.records {
            h.update(r.to_line().as_bytes()).update(b"\n");
        }
        h.finish()
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}
