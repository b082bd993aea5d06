//! The event loop.

use std::sync::Arc;

use tipcut_core::crypto::{Digest, KeyRegistry, ReplicaId};

use crate::metrics::Metrics;
use crate::net::{Network, SimEvent};
use crate::node::{Node, NodeOut};
use crate::scenario::{Behavior, Scenario, ScenarioError};
use crate::trace::{Event, Trace};
use crate::workload;

pub struct RunOutput {
    pub seed: u64,
    pub trace: Trace,
    pub trace_digest: Digest,
    pub metrics: Metrics,
    pub nodes: Vec<Node>,
}

impl RunOutput {
    pub fn ok(&self) -> bool {
        self.metrics.violations.is_empty()
    }
}

/// Run `sc` with `seed` to completion. Deterministic in `(sc, seed)`.
pub fn run(sc: &Scenario, seed: u64) -> Result<RunOutput, ScenarioError> {
    sc.validate()?;
    let n = sc.net.n;
    let reg = Arc::new(KeyRegistry::generate(n, seed));
    let genesis = sc
        .genesis()?
        .to_state()
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let mut net = Network::new(seed, sc.net.delay, sc.pre_gst_delay(), sc.net.gst_ms);
    let mut nodes: Vec<Node> = (0..n as u32)
        .map(|i| Node::new(ReplicaId(i), sc, reg.clone(), &genesis, seed))
        .collect();
    let mut trace = Trace::default();
    let faulty: Vec<u32> = sc.faulty_replicas().into_iter().collect();
    trace.push(
        0,
        Event::Start {
            n,
            f: sc.f(),
            seed,
            pipelined: sc.consensus.pipelined,
            round_trip_ms: sc.round_trip_ms(),
            byzantine_leaders: faulty.clone(),
            faulty,
        },
    );
    for fs in &sc.faults {
        if let Behavior::Crash { at_ms } = fs.behavior {
            net.schedule(at_ms, SimEvent::Crash(ReplicaId(fs.replica)));
        }
    }
    for s in workload::generate(sc, &reg, seed) {
        net.schedule(s.at_ms, SimEvent::Submit { lane: s.lane, tx: s.tx });
    }

    let mut out = Vec::new();
    for node in nodes.iter_mut() {
        node.start(0, &mut out);
        let from = node.id;
        dispatch(&mut net, &mut trace, from, &mut out);
    }
    let end = sc.run.duration_ms;
    while let Some(ev) = net.pop(end) {
        let now = net.now;
        let who = match ev {
            SimEvent::Deliver(env) => {
                nodes[env.to.index()].on_message(now, env.from, env.msg, &mut out);
                env.to
            }
            SimEvent::Timer(r, t) => {
                nodes[r.index()].on_timer(now, t, &mut out);
                r
            }
            SimEvent::Submit { lane, tx } => {
                nodes[lane.index()].submit(now, tx, &mut out);
                lane
            }
            SimEvent::Crash(r) => {
                if !nodes[r.index()].crashed {
                    nodes[r.index()].crash();
                    trace.push(now, Event::Crash { r: r.0 });
                }
                r
            }
        };
        dispatch(&mut net, &mut trace, who, &mut out);
    }
    let t_end = net.now.max(end);
    for node in &nodes {
        trace.push(t_end, node.stats_event());
    }
    trace.push(t_end, Event::End { messages: net.messages });
    let metrics = Metrics::from_trace(&trace.records);
    Ok(RunOutput {
        seed,
        trace_digest: trace.digest(),
        trace,
        metrics,
        nodes,
    })
}

fn dispatch(net: &mut Network, trace: &mut Trace, from: ReplicaId, out: &mut Vec<NodeOut>) {
    for o in out.drain(..) {
        match o {
            NodeOut::Send(to, m) => net.send(from, to, m),
            NodeOut::Timer(at, t) => net.schedule(at, SimEvent::Timer(from, t)),
            NodeOut::Trace(ev) => trace.push(net.now, ev),
        }
    }
}
