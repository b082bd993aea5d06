//! Discrete-event network: virtual milliseconds, point-to-point envelopes,
//! events ordered by `(time, envelope id)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tipcut_core::consensus::{ConsMsg, ConsTimer};
use tipcut_core::crypto::ReplicaId;
use tipcut_core::lane::LaneMsg;

use crate::scenario::DelayModel;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Msg {
    Lane(LaneMsg),
    Cons(ConsMsg),
}

impl Msg {
    pub fn kind(&self) -> &'static str {
        match self {
            Msg::Lane(m) => m.kind(),
            Msg::Cons(m) => m.kind(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Envelope {
    pub id: u64,
    pub from: ReplicaId,
    pub to: ReplicaId,
    pub send_ms: u64,
    pub deliver_ms: u64,
    pub msg: Msg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeTimer {
    Cons(ConsTimer),
    Fetch(u64),
}

#[derive(Clone, Debug)]
pub enum SimEvent {
    Deliver(Envelope),
    Timer(ReplicaId, NodeTimer),
    Submit { lane: ReplicaId, tx: Vec<u8> },
    Crash(ReplicaId),
}

struct Queued {
    at: u64,
    seq: u64,
    ev: SimEvent,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Queued {
    fn cmp(&self, o: &Self) -> Ordering {
        // Min-heap on (at, seq).
        (o.at, o.seq).cmp(&(self.at, self.seq))
    }
}

pub struct Network {
    queue: BinaryHeap<Queued>,
    seq: u64,
    rng: ChaCha8Rng,
    post: DelayModel,
    pre: DelayModel,
    gst_ms: u64,
    pub now: u64,
    pub messages: u64,
}

impl Network {
    pub fn new(seed: u64, post: DelayModel, pre: DelayModel, gst_ms: u64) -> Self {
        Self {
            queue: BinaryHeap::new(),
            seq: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477_6f72_6b00),
            post,
            pre,
            gst_ms,
            now: 0,
            messages: 0,
        }
    }

    fn sample(&mut self, model: DelayModel) -> u64 {
        match model {
            DelayModel::Fixed { ms } => ms,
            DelayModel::Uniform { min_ms, max_ms } => self.rng.gen_range(min_ms..=max_ms),
        }
    }

    /// One-way delay for a message sent now. Self-sends are immediate.
    /// A pre-GST message never arrives later than GST plus the post bound.
    pub fn delay(&mut self, from: ReplicaId, to: ReplicaId) -> u64 {
        if from == to {
            return 0;
        }
        if self.now < self.gst_ms {
            let d = self.sample(self.pre);
            let cap = self.gst_ms - self.now + self.post.max_ms();
            d.min(cap)
        } else {
            self.sample(self.post)
        }
    }

    pub fn schedule(&mut self, at: u64, ev: SimEvent) {
        self.seq += 1;
        self.queue.push(Queued {
            at: at.max(self.now),
            seq: self.seq,
            ev,
        });
    }

    pub fn send(&mut self, from: ReplicaId, to: ReplicaId, msg: Msg) {
        let d = self.delay(from, to);
        self.messages += 1;
        let env = Envelope {
            id: self.seq + 1,
            from,
            to,
            send_ms: self.now,
            deliver_ms: self.now + d,
            msg,
        };
        self.schedule(self.now + d, SimEvent::Deliver(env));
    }

    /// Next event at or before `until`, advancing the clock.
    pub fn pop(&mut self, until: u64) -> Option<SimEvent> {
        if self.queue.peek()?.at > until {
            return None;
        }
        let q = self.queue.pop()?;
        self.now = q.at;
        Some(q.ev)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_by_time_then_sequence() {
        let mut net = Network::new(1, DelayModel::Fixed { ms: 10 }, DelayModel::Fixed { ms: 10 }, 0);
        net.schedule(5, SimEvent::Crash(ReplicaId(2)));
        net.schedule(5, SimEvent::Crash(ReplicaId(1)));
        net.schedule(1, SimEvent::Crash(ReplicaId(3)));
        let got: Vec<u32> = std::iter::from_fn(|| net.pop(100))
            .map(|e| match e {
                SimEvent::Crash(r) => r.0,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(got, vec![3, 2, 1]);
    }

    #[test]
    fn pre_gst_delays_are_bounded_and_self_sends_free() {
        let mut net = Network::new(
            7,
            DelayModel::Fixed { ms: 10 },
            DelayModel::Uniform { min_ms: 10, max_ms: 100 },
            1000,
        );
        assert_eq!(net.delay(ReplicaId(0), ReplicaId(0)), 0);
        let ds: Vec<u64> = (0..200).map(|_| net.delay(ReplicaId(0), ReplicaId(1))).collect();
        assert!(ds.iter().all(|d| (10..=100).contains(d)));
        assert!(ds.iter().any(|d| *d > 50));
        net.now = 995;
        assert!(net.delay(ReplicaId(0), ReplicaId(1)) <= 15);
        net.now = 1000;
        assert_eq!(net.delay(ReplicaId(0), ReplicaId(1)), 10);
    }
}
