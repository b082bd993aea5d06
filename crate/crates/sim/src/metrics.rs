//! Metrics and safety audit computed from a trace alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::trace::{Event, Record};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub n: usize,
    pub f: usize,
    pub seed: u64,
    pub round_trip_ms: f64,
    /// Slots committed by every live correct replica.
    pub committed_slots: u64,
    pub first_commit_ms: Option<u64>,
    pub latency_samples: usize,
    pub latency_mean_ms: f64,
    pub latency_median_ms: f64,
    pub latency_mean_rt: f64,
    pub latency_median_rt: f64,
    pub view_changes: u64,
    pub confirm_path_commits: u64,
    pub executed_heights: u64,
    pub txs_executed: u64,
    pub duplicates_skipped: u64,
    /// Transaction digests executed more than once at some correct replica.
    pub duplicate_executions: u64,
    pub fetch_requests: u64,
    pub cars_fetched: u64,
    pub occ_aborts: u64,
    pub occ_fallbacks: u64,
    pub omission_flags: u64,
    pub state_commits: u64,
    pub state_lag_max: u64,
    pub state_lag_mean: f64,
    pub halted: bool,
    pub messages: u64,
    pub violations: Vec<String>,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

impl Metrics {
    /// Fraction of the earliest committed slots left out of latency
    /// statistics as warm-up.
    pub const WARMUP: f64 = 0.1;

    pub fn from_trace(records: &[Record]) -> Self {
        let mut m = Metrics::default();
        let mut faulty = BTreeSet::new();
        let mut crashed = BTreeSet::new();
        for rec in records {
            match &rec.ev {
                Event::Start {
                    n,
                    f,
                    seed,
                    round_trip_ms,
                    faulty: fl,
                    ..
                } => {
                    m.n = *n;
                    m.f = *f;
                    m.seed = *seed;
                    m.round_trip_ms = *round_trip_ms;
                    faulty = fl.iter().copied().collect();
                }
                Event::Crash { r } => {
                    crashed.insert(*r);
                }
                _ => {}
            }
        }
        let correct = |r: u32| !faulty.contains(&r);
        let live: Vec<u32> = (0..m.n as u32).filter(|r| correct(*r) && !crashed.contains(r)).collect();

        let mut proposals: BTreeMap<(u64, u64, String), u64> = BTreeMap::new();
        let mut commits: BTreeMap<u64, BTreeMap<u32, (u64, u64, String)>> = BTreeMap::new();
        let mut view_changes = BTreeSet::new();
        let mut exec_commitments: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
        let mut exec_heights: BTreeMap<u32, u64> = BTreeMap::new();
        let mut lane_pos: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        let mut seen_txs: BTreeMap<u32, BTreeSet<String>> = BTreeMap::new();
        let mut lags = Vec::new();
        for rec in records {
            match &rec.ev {
                Event::Proposed { slot, view, cut, .. } => {
                    proposals.entry((*slot, *view, cut.clone())).or_insert(rec.t);
                }
                Event::ViewChange { slot, view, r } if correct(*r) => {
                    view_changes.insert((*slot, *view));
                }
                Event::Committed {
                    r, slot, view, cut, path, ..
                } if correct(*r) => {
                    if m.first_commit_ms.is_none() {
                        m.first_commit_ms = Some(rec.t);
                    }
                    if path == "confirm" {
                        m.confirm_path_commits += 1;
                    }
                    commits.entry(*slot).or_default().insert(*r, (rec.t, *view, cut.clone()));
                }
                Event::Omission { r, .. } if correct(*r) => m.omission_flags += 1,
                Event::Executed {
                    r,
                    height,
                    cars,
                    txs,
                    duplicates,
                    commitment,
                    ..
                } if correct(*r) => {
                    exec_commitments.entry(*height).or_default().insert(commitment.clone());
                    let e = exec_heights.entry(*r).or_default();
                    *e = (*e).max(*height);
                    for (lane, pos) in cars {
                        if let Some(prev) = lane_pos.insert((*r, *lane), *pos) {
                            if *pos <= prev {
                                m.violations.push(format!(
                                    "replica {r}: lane {lane} committed pos {pos} after {prev}"
                                ));
                            }
                        }
                    }
                    let seen = seen_txs.entry(*r).or_default();
                    for d in txs {
                        if !seen.insert(d.clone()) {
                            m.duplicate_executions += 1;
                        }
                    }
                    if Some(r) == live.first() {
                        m.txs_executed += txs.len() as u64;
                        m.duplicates_skipped += duplicates;
                    }
                }
                Event::StateCommitted {
                    r,
                    lag,
                    matches_local,
                    height,
                    ..
                } if correct(*r) => {
                    if Some(r) == live.first() {
                        lags.push(*lag);
                    }
                    if !matches_local {
                        m.violations
                            .push(format!("replica {r}: state quorum for height {height} differs from local"));
                    }
                }
                Event::Halted { r, .. } if correct(*r) => m.halted = true,
                Event::Violation { r, what } => {
                    if r.is_none_or(correct) {
                        m.violations.push(what.clone());
                    }
                }
                Event::NodeStats {
                    r,
                    fetch_requests,
                    cars_fetched,
                    occ_aborts,
                    occ_fallbacks,
                    ..
                } if correct(*r) => {
                    m.fetch_requests += fetch_requests;
                    m.cars_fetched += cars_fetched;
                    m.occ_aborts += occ_aborts;
                    m.occ_fallbacks += occ_fallbacks;
                }
                Event::End { messages } => m.messages = *messages,
                _ => {}
            }
        }
        m.view_changes = view_changes.len() as u64;
        m.executed_heights = live.iter().map(|r| exec_heights.get(r).copied().unwrap_or(0)).min().unwrap_or(0);
        for (h, cs) in &exec_commitments {
            if cs.len() > 1 {
                m.violations.push(format!("height {h}: {} different state commitments", cs.len()));
            }
        }
        m.state_commits = lags.len() as u64;
        m.state_lag_max = lags.iter().copied().max().unwrap_or(0);
        m.state_lag_mean = if lags.is_empty() {
            0.0
        } else {
            lags.iter().sum::<u64>() as f64 / lags.len() as f64
        };

        // Safety: one cut per slot among correct replicas.
        let mut complete = Vec::new();
        for (slot, by) in &commits {
            let cuts: BTreeSet<&String> = by.values().map(|(_, _, c)| c).collect();
            if cuts.len() > 1 {
                m.violations.push(format!("slot {slot}: {} different committed cuts", cuts.len()));
                continue;
            }
            if live.iter().all(|r| by.contains_key(r)) {
                complete.push(*slot);
            }
        }
        // Slots form a prefix at each replica, so the complete ones do too.
        m.committed_slots = complete.len() as u64;

        let skip = (complete.len() as f64 * Self::WARMUP).ceil() as usize;
        let mut lat = Vec::new();
        for slot in complete.iter().skip(skip) {
            let by = &commits[slot];
            let (_, view, cut) = by.values().next().expect("non-empty").clone();
            let Some(p) = proposals.get(&(*slot, view, cut)) else {
                continue;
            };
            let done = live.iter().filter_map(|r| by.get(r)).map(|(t, _, _)| *t).max().unwrap_or(*p);
            lat.push((done - p) as f64);
        }
        m.latency_samples = lat.len();
        if !lat.is_empty() {
            m.latency_mean_ms = lat.iter().sum::<f64>() / lat.len() as f64;
            m.latency_median_ms = median(&mut lat);
            if m.round_trip_ms > 0.0 {
                m.latency_mean_rt = m.latency_mean_ms / m.round_trip_ms;
                m.latency_median_rt = m.latency_median_ms / m.round_trip_ms;
            }
        }
        m
    }

    /// `key=value` lines.
    pub fn to_lines(&self) -> String {
        let v = serde_json::to_value(self).expect("metrics serialize");
        let mut s = String::new();
        for (k, val) in v.as_object().expect("object") {
            s.push_str(&format!("{k}={val}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn table(&self) -> String {
        let first = self.first_commit_ms.map_or("-".into(), |t| format!("{t} ms"));
        let rows: Vec<(&str, String)> = vec![
            ("replicas", format!("n={} f={}", self.n, self.f)),
            ("committed slots", self.committed_slots.to_string()),
            ("first commit", first),
            (
                "commit latency mean",
                format!("{:.1} ms ({:.3} RT)", self.latency_mean_ms, self.latency_mean_rt),
            ),
            (
                "commit latency median",
                format!("{:.1} ms ({:.3} RT)", self.latency_median_ms, self.latency_median_rt),
            ),
            ("view changes", self.view_changes.to_string()),
            ("executed heights", self.executed_heights.to_string()),
            ("txs executed", self.txs_executed.to_string()),
            ("duplicates skipped", self.duplicates_skipped.to_string()),
            ("fetch requests", self.fetch_requests.to_string()),
            ("occ aborts", self.occ_aborts.to_string()),
            (
                "state lag x",
                format!("max {} mean {:.2} over {} records", self.state_lag_max, self.state_lag_mean, self.state_commits),
            ),
            ("halted", self.halted.to_string()),
            ("violations", self.violations.len().to_string()),
        ];
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }
}
