//! Deterministic discrete-event network.
//!
//! Each node has one egress and one ingress port of equal capacity. Every
//! message in transmission is a flow, and flows share port capacity
//! max-min fairly. A message is delivered `latency` seconds after its last
//! byte leaves the sender, but never before an earlier message on the same
//! directed link.
//! Traffic from a node to itself is handed over instantly and metered as
//! local.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashSet, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, TrafficMeter, TransportError};

/// Anything the simulator can carry.
pub trait SimPayload {
    fn wire_bytes(&self) -> u64;
    fn layer(&self) -> Option<u32> {
        None
    }
}

impl SimPayload for Frame {
    fn wire_bytes(&self) -> u64 {
        self.wire_len() as u64
    }
    fn layer(&self) -> Option<u32> {
        self.layer_index()
    }
}

/// Scenario file form of [`SimConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenarioConfig {
    /// Per-port capacity; omitted or null means unlimited.
    #[serde(default)]
    pub bandwidth_mbps: Option<f64>,
    #[serde(default)]
    pub latency_ms: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub reorder: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub bandwidth_bits_per_sec: Option<f64>,
    /// Seconds.
    pub latency: f64,
    pub seed: u64,
    /// Adds seeded jitter to every delivery while keeping per-link FIFO.
    pub reorder: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            bandwidth_bits_per_sec: None,
            latency: 0.0,
            seed: 0,
            reorder: false,
        }
    }
}

impl SimConfig {
    pub fn with_bandwidth(bits_per_sec: f64) -> Self {
        SimConfig {
            bandwidth_bits_per_sec: Some(bits_per_sec),
            ..Default::default()
        }
    }
}

impl From<&SimScenarioConfig> for SimConfig {
    fn from(c: &SimScenarioConfig) -> Self {
        SimConfig {
            bandwidth_bits_per_sec: c.bandwidth_mbps.map(|m| m * 1e6),
            latency: c.latency_ms / 1e3,
            seed: c.seed,
            reorder: c.reorder,
        }
    }
}

#[derive(Debug)]
pub enum SimEvent<M> {
    Delivered {
        id: u64,
        src: usize,
        dst: usize,
        at: f64,
        msg: M,
    },
    Timer {
        token: u64,
        at: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct Time(f64);

impl PartialEq for Time {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

enum Pending<M> {
    Deliver { id: u64, src: usize, dst: usize, msg: M },
    Timer(u64),
}

struct Flow<M> {
    id: u64,
    src: usize,
    dst: usize,
    remaining: f64,
    rate: f64,
    msg: M,
}

#[derive(Default)]
struct Link<M> {
    /// Messages in send order; `Some` once fully transmitted.
    in_flight: VecDeque<(u64, Option<M>)>,
    last_delivery: f64,
}

pub struct SimNetwork<M> {
    nodes: usize,
    cfg: SimConfig,
    now: f64,
    rng: ChaCha8Rng,
    links: BTreeMap<(usize, usize), Link<M>>,
    flows: Vec<Flow<M>>,
    heap: BinaryHeap<Reverse<(Time, u64)>>,
    pending: BTreeMap<u64, Pending<M>>,
    seq: u64,
    next_id: u64,
    closed: Vec<bool>,
    cut: HashSet<(usize, usize)>,
    meter: Arc<TrafficMeter>,
}

impl<M: SimPayload> SimNetwork<M> {
    pub fn new(nodes: usize, cfg: SimConfig) -> Self {
        SimNetwork {
            nodes,
            cfg,
            now: 0.0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            links: BTreeMap::new(),
            flows: Vec::new(),
            heap: BinaryHeap::new(),
            pending: BTreeMap::new(),
            seq: 0,
            next_id: 0,
            closed: vec![false; nodes],
            cut: HashSet::new(),
            meter: Arc::new(TrafficMeter::new(nodes)),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn meter(&self) -> &Arc<TrafficMeter> {
        &self.meter
    }

    /// Marks a node closed; later sends from or to it fail.
    pub fn close(&mut self, node: usize) {
        self.closed[node] = true;
    }

    /// Drops the directed link `src -> dst`; later sends on it fail.
    pub fn cut_link(&mut self, src: usize, dst: usize) {
        self.cut.insert((src, dst));
    }

    /// Queues `msg` on the link `src -> dst` at the current time and returns
    /// its delivery id.
    pub fn send(&mut self, src: usize, dst: usize, msg: M) -> Result<u64, TransportError> {
        for n in [src, dst] {
            if n >= self.nodes {
                return Err(TransportError::UnknownPeer(n));
            }
        }
        if self.closed[src] || self.closed[dst] || self.cut.contains(&(src, dst)) {
            return Err(TransportError::Closed(dst));
        }
        let id = self.next_id;
        self.next_id += 1;
        let bytes = msg.wire_bytes();
        self.meter.record_transfer(src, dst, msg.layer(), bytes);
        if src == dst {
            self.push_pending(self.now, Pending::Deliver { id, src, dst, msg });
            return Ok(id);
        }
        let link = self.links.entry((src, dst)).or_insert_with(|| Link {
            in_flight: VecDeque::new(),
            last_delivery: 0.0,
        });
        if self.cfg.bandwidth_bits_per_sec.is_none() {
            link.in_flight.push_back((id, Some(msg)));
            self.release(src, dst);
        } else {
            link.in_flight.push_back((id, None));
            self.flows.push(Flow {
                id,
                src,
                dst,
                remaining: bytes as f64,
                rate: 0.0,
                msg,
            });
            self.recompute_rates();
        }
        Ok(id)
    }

    pub fn schedule_timer(&mut self, at: f64, token: u64) {
        let at = at.max(self.now);
        self.push_pending(at, Pending::Timer(token));
    }

    pub fn is_idle(&self) -> bool {
        self.flows.is_empty() && self.heap.is_empty()
    }

    /// Advances time to the next delivery or timer and returns it.
    pub fn next_event(&mut self) -> Option<SimEvent<M>> {
        loop {
            let flow_t = self.next_flow_completion();
            let heap_t = self.heap.peek().map(|Reverse((t, _))| t.0);
            match (flow_t, heap_t) {
                (None, None) => return None,
                (Some(ft), ht) if ht.is_none_or(|ht| ft <= ht) => self.complete_flows(ft),
                _ => {
                    let Reverse((t, seq)) = self.heap.pop().expect("peeked");
                    self.advance_flows(t.0);
                    let ev = self.pending.remove(&seq).expect("pending event");
                    return Some(match ev {
                        Pending::Deliver { id, src, dst, msg } => SimEvent::Delivered {
                            id,
                            src,
                            dst,
                            at: t.0,
                            msg,
                        },
                        Pending::Timer(token) => SimEvent::Timer { token, at: t.0 },
                    });
                }
            }
        }
    }

    fn push_pending(&mut self, at: f64, p: Pending<M>) {
        let seq = self.seq;
        self.seq += 1;
        self.pending.insert(seq, p);
        self.heap.push(Reverse((Time(at), seq)));
    }

    /// Hands transmitted messages at the head of the link to delivery, in
    /// send order.
    fn release(&mut self, src: usize, dst: usize) {
        loop {
            let link = self.links.get_mut(&(src, dst)).expect("link exists");
            match link.in_flight.front_mut() {
                Some((id, msg @ Some(_))) => {
                    let (id, msg) = (*id, msg.take().unwrap());
                    link.in_flight.pop_front();
                    self.finish_transfer(src, dst, id, msg);
                }
                _ => return,
            }
        }
    }

    fn finish_transfer(&mut self, src: usize, dst: usize, id: u64, msg: M) {
        let mut at = self.now + self.cfg.latency;
        if self.cfg.reorder {
            at += self.rng.random::<f64>() * (self.cfg.latency + 1e-3);
        }
        let link = self.links.get_mut(&(src, dst)).expect("link exists");
        at = at.max(link.last_delivery);
        link.last_delivery = at;
        self.push_pending(at, Pending::Deliver { id, src, dst, msg });
    }

    fn next_flow_completion(&self) -> Option<f64> {
        self.flows
            .iter()
            .map(|f| self.now + f.remaining / f.rate)
            .min_by(f64::total_cmp)
    }

    fn advance_flows(&mut self, t: f64) {
        let dt = t - self.now;
        if dt > 0.0 {
            for f in &mut self.flows {
                f.remaining = (f.remaining - f.rate * dt).max(0.0);
            }
        }
        self.now = self.now.max(t);
    }

    fn complete_flows(&mut self, t: f64) {
        let now = self.now;
        let tol = 1e-12 * t.abs().max(1e-9);
        let mut done = Vec::new();
        let mut i = 0;
        while i < self.flows.len() {
            let f = &self.flows[i];
            if now + f.remaining / f.rate <= t + tol {
                done.push(self.flows.remove(i));
            } else {
                i += 1;
            }
        }
        self.advance_flows(t);
        for f in done {
            let link = self.links.get_mut(&(f.src, f.dst)).expect("link exists");
            if let Some(slot) = link.in_flight.iter_mut().find(|(id, _)| *id == f.id) {
                slot.1 = Some(f.msg);
            }
            self.release(f.src, f.dst);
        }
        self.recompute_rates();
    }

    /// Max-min fair rates by progressive filling over egress and ingress
    /// ports.
    fn recompute_rates(&mut self) {
        let Some(bits) = self.cfg.bandwidth_bits_per_sec else {
            return;
        };
        let cap = bits / 8.0;
        let n = self.nodes;
        // Resources 0..n are egress ports, n..2n ingress ports.
        let mut left = vec![cap; 2 * n];
        let mut count = vec![0usize; 2 * n];
        for f in &self.flows {
            count[f.src] += 1;
            count[n + f.dst] += 1;
        }
        let mut frozen = vec![false; self.flows.len()];
        let mut remaining = self.flows.len();
        while remaining > 0 {
            let (r, share) = (0..2 * n)
                .filter(|&r| count[r] > 0)
                .map(|r| (r, left[r].max(0.0) / count[r] as f64))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("unfrozen flow has a resource");
            for (i, f) in self.flows.iter_mut().enumerate() {
                if frozen[i] || (f.src != r && n + f.dst != r) {
                    continue;
                }
                frozen[i] = true;
                remaining -= 1;
                f.rate = share.max(f64::MIN_POSITIVE);
                for res in [f.src, n + f.dst] {
                    left[res] -= share;
                    count[res] -= 1;
                }
            }
        }
    }
}

/// One entry of a scripted simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSend {
    pub at: f64,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    /// Index into the script.
    pub index: usize,
    pub src: usize,
    pub dst: usize,
    pub sent_at: f64,
    pub delivered_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRunLog {
    pub deliveries: Vec<DeliveryRecord>,
    pub makespan: f64,
}

struct ScriptMsg {
    index: usize,
    bytes: u64,
}

impl SimPayload for ScriptMsg {
    fn wire_bytes(&self) -> u64 {
        self.bytes
    }
}

/// Plays a script of sends and returns deliveries in the order they happen.
pub fn simulated_run(nodes: usize, cfg: SimConfig, script: &[ScriptedSend]) -> Result<SimRunLog, TransportError> {
    let mut net = SimNetwork::<ScriptMsg>::new(nodes, cfg);
    for (i, s) in script.iter().enumerate() {
        net.schedule_timer(s.at, i as u64);
    }
    let mut deliveries = Vec::with_capacity(script.len());
    let mut makespan = 0.0f64;
    while let Some(ev) = net.next_event() {
        match ev {
            SimEvent::Timer { token, .. } => {
                let s = &script[token as usize];
                net.send(
                    s.src,
                    s.dst,
                    ScriptMsg {
                        index: token as usize,
                        bytes: s.bytes,
                    },
                )?;
            }
            SimEvent::Delivered { src, dst, at, msg, .. } => {
                makespan = makespan.max(at);
                deliveries.push(DeliveryRecord {
                    index: msg.index,
                    src,
                    dst,
                    sent_at: script[msg.index].at,
                    delivered_at: at,
                });
            }
        }
    }
    Ok(SimRunLog { deliveries, makespan })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{MsgType, HEADER_BYTES};

    fn frame(payload: usize) -> Frame {
        Frame {
            msg_type: MsgType::PushChunk,
            layer: 0,
            chunk_id: 0,
            iteration: 0,
            origin: 0,
            payload: vec![0; payload],
        }
    }

    #[test]
    fn one_mebibyte_at_100_mbit() {
        let mut net = SimNetwork::new(2, SimConfig::with_bandwidth(1e8));
        net.send(0, 1, frame(1 << 20)).unwrap();
        let Some(SimEvent::Delivered { at, msg, .. }) = net.next_event() else {
            panic!()
        };
        let expected = 8.0 * (1 << 20) as f64 / 1e8;
        assert!((at - expected).abs() < 1e-4, "{at}");
        let exact = 8.0 * ((1 << 20) + HEADER_BYTES) as f64 / 1e8;
        assert!((at - exact).abs() < 1e-12);
        assert_eq!(msg.payload.len(), 1 << 20);
        assert!(net.next_event().is_none());
    }

    #[test]
    fn latency_is_added_after_transmission() {
        let cfg = SimConfig {
            latency: 0.5,
            ..SimConfig::with_bandwidth(8.0)
        };
        let mut net = SimNetwork::new(2, cfg);
        net.send(0, 1, ScriptMsg { index: 0, bytes: 2 }).unwrap();
        let Some(SimEvent::Delivered { at, .. }) = net.next_event() else {
            panic!()
        };
        assert!((at - 2.5).abs() < 1e-12);
    }

    #[test]
    fn send_after_close_fails() {
        let mut net = SimNetwork::<Frame>::new(2, SimConfig::default());
        net.close(1);
        assert!(matches!(net.send(0, 1, frame(0)), Err(TransportError::Closed(1))));
        net.cut_link(1, 0);
        assert!(net.send(1, 0, frame(0)).is_err());
        assert!(matches!(net.send(0, 5, frame(0)), Err(TransportError::UnknownPeer(5))));
    }

    #[test]
    fn self_sends_are_instant_and_local() {
        let mut net = SimNetwork::new(2, SimConfig::with_bandwidth(1.0));
        net.send(1, 1, frame(100)).unwrap();
        let Some(SimEvent::Delivered { at, .. }) = net.next_event() else {
            panic!()
        };
        assert_eq!(at, 0.0);
        let s = net.meter().snapshot();
        assert_eq!(s.local[1], 140);
        assert_eq!(s.nic_bytes(), 0);
    }

    #[test]
    fn link_is_fifo() {
        let script = vec![
            ScriptedSend {
                at: 0.0,
                src: 0,
                dst: 1,
                bytes: 1000,
            },
            ScriptedSend {
                at: 0.0,
                src: 0,
                dst: 1,
                bytes: 10,
            },
        ];
        for reorder in [false, true] {
            let cfg = SimConfig {
                reorder,
                latency: 0.01,
                ..SimConfig::with_bandwidth(1e6)
            };
            let log = simulated_run(2, cfg, &script).unwrap();
            let order: Vec<_> = log.deliveries.iter().map(|d| d.index).collect();
            assert_eq!(order, vec![0, 1]);
        }
    }

    #[test]
    fn ingress_bottleneck_versus_spread() {
        let bytes = 1_000_000;
        let to_one: Vec<_> = (1..=8)
            .map(|s| ScriptedSend {
                at: 0.0,
                src: s,
                dst: 0,
                bytes,
            })
            .collect();
        let spread: Vec<_> = (0..8)
            .map(|s| ScriptedSend {
                at: 0.0,
                src: s,
                dst: 8 + s,
                bytes,
            })
            .collect();
        let cfg = SimConfig::with_bandwidth(1e9);
        let a = simulated_run(16, cfg, &to_one).unwrap().makespan;
        let b = simulated_run(16, cfg, &spread).unwrap().makespan;
        assert!((a / b - 8.0).abs() < 1e-9, "{a} {b}");
    }

    #[test]
    fn fair_share_frees_capacity_when_flows_finish() {
        // Node 0 sends 1 MB to node 1 and 2 MB to node 2. Both share egress
        // until the first finishes at 2 s; the second then runs alone.
        let script = vec![
            ScriptedSend {
                at: 0.0,
                src: 0,
                dst: 1,
                bytes: 1_000_000,
            },
            ScriptedSend {
                at: 0.0,
                src: 0,
                dst: 2,
                bytes: 2_000_000,
            },
        ];
        let log = simulated_run(3, SimConfig::with_bandwidth(8e6), &script).unwrap();
        assert!((log.deliveries[0].delivered_at - 2.0).abs() < 1e-9);
        assert!((log.deliveries[1].delivered_at - 3.0).abs() < 1e-9);
    }

    #[test]
    fn reorder_is_seeded() {
        let script: Vec<_> = (0..20)
            .map(|i| ScriptedSend {
                at: 0.0,
                src: i % 4,
                dst: (i + 1) % 4,
                bytes: 100,
            })
            .collect();
        let run = |seed| {
            let cfg = SimConfig {
                reorder: true,
                seed,
                latency: 0.001,
                ..SimConfig::with_bandwidth(1e7)
            };
            simulated_run(4, cfg, &script).unwrap()
        };
        assert_eq!(run(7), run(7));
        let a: Vec<_> = run(7).deliveries.iter().map(|d| d.index).collect();
        let b: Vec<_> = run(8).deliveries.iter().map(|d| d.index).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn unlimited_bandwidth_delivers_at_latency() {
        let cfg = SimConfig {
            latency: 0.25,
            ..SimConfig::default()
        };
        let script = vec![ScriptedSend {
            at: 1.0,
            src: 0,
            dst: 1,
            bytes: u32::MAX as u64,
        }];
        let log = simulated_run(2, cfg, &script).unwrap();
        assert_eq!(log.makespan, 1.25);
    }

    #[test]
    fn scenario_config_parses() {
        let c: SimScenarioConfig =
            serde_json::from_str(r#"{"bandwidth_mbps": 100, "latency_ms": 2, "seed": 3, "reorder": true}"#).unwrap();
        let s = SimConfig::from(&c);
        assert_eq!(s.bandwidth_bits_per_sec, Some(1e8));
        assert_eq!(s.latency, 0.002);
        assert!(s.reorder);
    }
}
