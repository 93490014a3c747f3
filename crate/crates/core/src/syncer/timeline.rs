//! Discrete-event replay of training iterations on the simulated network.
//!
//! Every worker runs `f_1 .. f_L` then `b_L .. b_1` on one compute unit.
//! In wait-free mode layer `l`'s sync starts as soon as `b_l` finishes;
//! otherwise all syncs start after `b_1`, top layer first. The forward step
//! of layer `l` in the next iteration waits until the layer is synchronized.
//! Messages carry the same byte counts as the real frames; servers reply
//! without processing delay.

use std::collections::HashMap;

use super::{Route, SyncMode};
use crate::kvstore::{partition_with, Partition};
use crate::modelspec::{ClusterConfig, ModelSpec, NodeLayout};
use crate::transport::sim::{SimConfig, SimEvent, SimNetwork, SimPayload};
use crate::transport::{TrafficSnapshot, HEADER_BYTES};

const SF_PAYLOAD_HEADER: u64 = 12;

/// Simulated compute time of one layer, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCompute {
    pub forward: f64,
    pub backward: f64,
}

/// Splits `total` seconds per iteration over the layers in proportion to
/// their parameter counts, one third forward and two thirds backward.
pub fn compute_by_params(model: &ModelSpec, total: f64) -> Vec<LayerCompute> {
    let params = model.total_params().max(1) as f64;
    model
        .layers
        .iter()
        .map(|l| {
            let t = total * l.param_count as f64 / params;
            LayerCompute {
                forward: t / 3.0,
                backward: 2.0 * t / 3.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Push { chunk: u64 },
    Broadcast,
    Factors,
    AdamPush,
}

#[derive(Debug, Clone)]
struct Msg {
    kind: Kind,
    layer: usize,
    iteration: usize,
    bytes: u64,
}

impl SimPayload for Msg {
    fn wire_bytes(&self) -> u64 {
        self.bytes
    }
    fn layer(&self) -> Option<u32> {
        Some(self.layer as u32)
    }
}

#[derive(Debug, Clone)]
pub struct TimelineReport {
    /// Time at which every worker finished the last iteration.
    pub makespan: f64,
    /// Completion time of each iteration across all workers.
    pub iteration_end: Vec<f64>,
    /// Compute time per worker over the run.
    pub compute: f64,
    /// Mean idle time per worker.
    pub stall: f64,
    pub traffic: TrafficSnapshot,
    /// Bytes pushed to plus broadcast from each server shard.
    pub server_bytes: Vec<u64>,
    /// Bytes sent plus received by each worker role.
    pub worker_bytes: Vec<u64>,
    pub layout: NodeLayout,
    /// `layer_done[t][w][l]`: when worker `w` finished syncing layer `l` in
    /// iteration `t`.
    pub layer_done: Vec<Vec<Vec<f64>>>,
}

impl TimelineReport {
    pub fn samples_per_sec(&self, workers: usize, batch: usize) -> f64 {
        (workers * batch * self.iteration_end.len()) as f64 / self.makespan
    }

    pub fn stall_ratio(&self) -> f64 {
        if self.stall + self.compute == 0.0 {
            0.0
        } else {
            self.stall / (self.stall + self.compute)
        }
    }
}

/// A model, cluster and strategy ready to replay.
#[derive(Debug, Clone)]
pub struct Timeline {
    pub workers: usize,
    pub servers: usize,
    pub batch: usize,
    pub layout: NodeLayout,
    pub routes: Vec<Route>,
    pub partition: Partition,
    pub compute: Vec<LayerCompute>,
    pub wait_free: bool,
    shapes: Vec<(usize, usize)>,
    quantized: Vec<bool>,
}

impl Timeline {
    pub fn new(model: &ModelSpec, cluster: &ClusterConfig, mode: SyncMode, compute: Vec<LayerCompute>) -> Self {
        assert_eq!(compute.len(), model.num_layers(), "one compute entry per layer");
        let plan = mode.plan(model, cluster);
        let routes = mode.routes(model, &plan);
        let policies: Vec<_> = routes.iter().map(|r| r.chunk_policy()).collect();
        let partition = partition_with(model, cluster, &policies);
        Timeline {
            workers: cluster.num_workers(),
            servers: cluster.num_servers(),
            batch: model.batch_size,
            layout: cluster.layout(),
            quantized: model.layers.iter().map(|l| mode.quantizes(l.kind)).collect(),
            shapes: model.layers.iter().map(|l| (l.rows(), l.cols())).collect(),
            routes,
            partition,
            compute,
            wait_free: mode.wait_free(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.routes.len()
    }

    pub fn compute_per_iteration(&self) -> f64 {
        self.compute.iter().map(|c| c.forward + c.backward).sum()
    }

    fn push_bytes(&self, layer: usize, len: usize) -> u64 {
        let (m, n) = self.shapes[layer];
        let payload = if self.quantized[layer] {
            // Sign bits plus two scalars per column, prorated to the chunk.
            len.div_ceil(8) as u64 + (8 * n * len / (m * n).max(1)) as u64
        } else {
            4 * len as u64
        };
        HEADER_BYTES as u64 + payload
    }

    fn factor_bytes(&self, layer: usize) -> u64 {
        let (m, n) = self.shapes[layer];
        HEADER_BYTES as u64 + SF_PAYLOAD_HEADER + 4 * (self.batch * (m + n)) as u64
    }

    /// Replays `iterations` iterations.
    pub fn run(&self, sim: SimConfig, iterations: usize) -> TimelineReport {
        Replay::new(self, sim, iterations).run_training()
    }

    /// Time to synchronize layer `layer` alone, all workers starting at once
    /// on an idle network.
    pub fn isolated_sync_time(&self, layer: usize, sim: SimConfig) -> f64 {
        let mut r = Replay::new(self, sim, 1);
        r.computing = false;
        for w in 0..self.workers {
            r.start_sync(w, layer, 0);
        }
        r.drain();
        r.layer_done_at.values().fold(0.0, |m, &t| f64::max(m, t))
    }
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Forward(usize),
    Backward(usize),
}

struct WorkerState {
    iteration: usize,
    step: Step,
    busy: bool,
    /// Number of completed syncs per layer.
    synced: Vec<usize>,
    compute: f64,
}

struct Replay<'a> {
    tl: &'a Timeline,
    net: SimNetwork<Msg>,
    iterations: usize,
    /// Whether workers run compute steps at all.
    computing: bool,
    workers: Vec<WorkerState>,
    timers: Vec<(usize, Step)>,
    /// (chunk or layer key, iteration) -> pushes seen by the server.
    server_counts: HashMap<(u64, usize), usize>,
    /// (worker, layer, iteration) -> messages received.
    inbox: HashMap<(usize, usize, usize), usize>,
    /// (worker, layer, iteration) -> own sync started.
    started: HashMap<(usize, usize, usize), bool>,
    layer_done_at: HashMap<(usize, usize, usize), f64>,
    iteration_done: Vec<usize>,
    iteration_end: Vec<f64>,
    server_bytes: Vec<u64>,
    worker_bytes: Vec<u64>,
}

impl<'a> Replay<'a> {
    fn new(tl: &'a Timeline, sim: SimConfig, iterations: usize) -> Self {
        let l = tl.num_layers();
        Replay {
            tl,
            net: SimNetwork::new(tl.layout.num_nodes(), sim),
            iterations,
            computing: true,
            workers: (0..tl.workers)
                .map(|_| WorkerState {
                    iteration: 0,
                    step: Step::Forward(0),
                    busy: false,
                    synced: vec![0; l],
                    compute: 0.0,
                })
                .collect(),
            timers: Vec::new(),
            server_counts: HashMap::new(),
            inbox: HashMap::new(),
            started: HashMap::new(),
            layer_done_at: HashMap::new(),
            iteration_done: vec![0; iterations],
            iteration_end: vec![0.0; iterations],
            server_bytes: vec![0; tl.servers],
            worker_bytes: vec![0; tl.workers],
        }
    }

    fn worker_node(&self, w: usize) -> usize {
        self.tl.layout.worker_nodes[w]
    }

    fn server_node(&self, s: usize) -> usize {
        self.tl.layout.server_nodes[s]
    }

    fn send(&mut self, src: usize, dst: usize, msg: Msg) {
        self.net.send(src, dst, msg).expect("simulated links stay open");
    }

    fn start_sync(&mut self, w: usize, layer: usize, t: usize) {
        self.started.insert((w, layer, t), true);
        let src = self.worker_node(w);
        match self.tl.routes[layer] {
            Route::Ps => {
                for &id in self.tl.partition.layer_chunks(layer) {
                    let c = *self.tl.partition.chunk(id).unwrap();
                    let bytes = self.tl.push_bytes(layer, c.len);
                    self.worker_bytes[w] += bytes;
                    self.server_bytes[c.server] += bytes;
                    let dst = self.server_node(c.server);
                    self.send(
                        src,
                        dst,
                        Msg {
                            kind: Kind::Push { chunk: id },
                            layer,
                            iteration: t,
                            bytes,
                        },
                    );
                }
            }
            Route::Adam => {
                let id = self.tl.partition.layer_chunks(layer)[0];
                let c = *self.tl.partition.chunk(id).unwrap();
                let bytes = self.tl.factor_bytes(layer);
                self.worker_bytes[w] += bytes;
                self.server_bytes[c.server] += bytes;
                let dst = self.server_node(c.server);
                self.send(
                    src,
                    dst,
                    Msg {
                        kind: Kind::AdamPush,
                        layer,
                        iteration: t,
                        bytes,
                    },
                );
            }
            Route::Sfb => {
                let bytes = self.tl.factor_bytes(layer);
                for p in (0..self.tl.workers).filter(|&p| p != w) {
                    self.worker_bytes[w] += bytes;
                    self.worker_bytes[p] += bytes;
                    let dst = self.worker_node(p);
                    self.send(
                        src,
                        dst,
                        Msg {
                            kind: Kind::Factors,
                            layer,
                            iteration: t,
                            bytes,
                        },
                    );
                }
            }
        }
        self.check_layer(w, layer, t);
    }

    fn expected(&self, layer: usize) -> usize {
        match self.tl.routes[layer] {
            Route::Ps => self.tl.partition.layer_chunks(layer).len(),
            Route::Adam => 1,
            Route::Sfb => self.tl.workers - 1,
        }
    }

    fn check_layer(&mut self, w: usize, layer: usize, t: usize) {
        let key = (w, layer, t);
        if self.layer_done_at.contains_key(&key) || !self.started.contains_key(&key) {
            return;
        }
        if self.inbox.get(&key).copied().unwrap_or(0) < self.expected(layer) {
            return;
        }
        let now = self.net.now();
        self.layer_done_at.insert(key, now);
        self.workers[w].synced[layer] += 1;
        if self.workers[w].synced.iter().all(|&s| s > t) && t < self.iterations {
            self.iteration_done[t] += 1;
            if self.iteration_done[t] == self.tl.workers {
                self.iteration_end[t] = now;
            }
        }
    }

    fn on_delivery(&mut self, dst: usize, msg: Msg) {
        match msg.kind {
            Kind::Push { chunk } => {
                let n = self.server_counts.entry((chunk, msg.iteration)).or_insert(0);
                *n += 1;
                if *n == self.tl.workers {
                    let c = *self.tl.partition.chunk(chunk).unwrap();
                    let bytes = HEADER_BYTES as u64 + c.bytes();
                    self.broadcast(dst, c.server, msg.layer, msg.iteration, bytes);
                }
            }
            Kind::AdamPush => {
                let key = (u64::MAX - msg.layer as u64, msg.iteration);
                let n = self.server_counts.entry(key).or_insert(0);
                *n += 1;
                if *n == self.tl.workers {
                    let id = self.tl.partition.layer_chunks(msg.layer)[0];
                    let c = *self.tl.partition.chunk(id).unwrap();
                    let bytes = HEADER_BYTES as u64 + c.bytes();
                    self.broadcast(dst, c.server, msg.layer, msg.iteration, bytes);
                }
            }
            Kind::Broadcast | Kind::Factors => {
                let w = self.tl.layout.worker_on(dst).expect("delivered to a worker node");
                *self.inbox.entry((w, msg.layer, msg.iteration)).or_insert(0) += 1;
                self.check_layer(w, msg.layer, msg.iteration);
                self.advance(w);
            }
        }
    }

    fn broadcast(&mut self, node: usize, server: usize, layer: usize, t: usize, bytes: u64) {
        for w in 0..self.tl.workers {
            self.server_bytes[server] += bytes;
            self.worker_bytes[w] += bytes;
            let dst = self.worker_node(w);
            self.send(
                node,
                dst,
                Msg {
                    kind: Kind::Broadcast,
                    layer,
                    iteration: t,
                    bytes,
                },
            );
        }
    }

    /// Starts the next compute step of worker `w` if its inputs are ready.
    fn advance(&mut self, w: usize) {
        let st = &self.workers[w];
        if !self.computing || st.busy || st.iteration >= self.iterations {
            return;
        }
        let (dur, step) = match st.step {
            Step::Forward(l) => {
                if st.synced[l] < st.iteration {
                    return;
                }
                (self.tl.compute[l].forward, Step::Forward(l))
            }
            Step::Backward(l) => (self.tl.compute[l].backward, Step::Backward(l)),
        };
        let token = self.timers.len() as u64;
        self.timers.push((w, step));
        let st = &mut self.workers[w];
        st.busy = true;
        st.compute += dur;
        let at = self.net.now() + dur;
        self.net.schedule_timer(at, token);
    }

    fn on_compute_done(&mut self, w: usize, step: Step) {
        let last = self.tl.num_layers() - 1;
        let t = self.workers[w].iteration;
        self.workers[w].busy = false;
        match step {
            Step::Forward(l) if l < last => self.workers[w].step = Step::Forward(l + 1),
            Step::Forward(_) => self.workers[w].step = Step::Backward(last),
            Step::Backward(l) => {
                if self.tl.wait_free {
                    self.start_sync(w, l, t);
                }
                if l > 0 {
                    self.workers[w].step = Step::Backward(l - 1);
                } else {
                    if !self.tl.wait_free {
                        for layer in (0..=last).rev() {
                            self.start_sync(w, layer, t);
                        }
                    }
                    self.workers[w].iteration += 1;
                    self.workers[w].step = Step::Forward(0);
                }
            }
        }
        self.advance(w);
    }

    fn drain(&mut self) {
        while let Some(ev) = self.net.next_event() {
            match ev {
                SimEvent::Delivered { dst, msg, .. } => self.on_delivery(dst, msg),
                SimEvent::Timer { token, .. } => {
                    let (w, step) = self.timers[token as usize];
                    self.on_compute_done(w, step);
                }
            }
        }
    }

    fn run_training(mut self) -> TimelineReport {
        for w in 0..self.tl.workers {
            self.advance(w);
        }
        self.drain();
        let makespan = self.iteration_end.iter().fold(0.0, |m: f64, &t| m.max(t));
        let compute = self.workers.iter().map(|w| w.compute).sum::<f64>() / self.tl.workers as f64;
        let mut layer_done = vec![vec![vec![f64::NAN; self.tl.num_layers()]; self.tl.workers]; self.iterations];
        for (&(w, l, t), &at) in &self.layer_done_at {
            layer_done[t][w][l] = at;
        }
        TimelineReport {
            makespan,
            iteration_end: self.iteration_end,
            compute,
            stall: makespan - compute,
            traffic: self.net.meter().snapshot(),
            server_bytes: self.server_bytes,
            worker_bytes: self.worker_bytes,
            layout: self.tl.layout.clone(),
            layer_done,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::LayerSpec;

    fn mlp() -> ModelSpec {
        ModelSpec::new(
            vec![
                LayerSpec::fully_connected(0, "fc1", 256, 784),
                LayerSpec::fully_connected(1, "fc2", 64, 256),
                LayerSpec::fully_connected(2, "fc3", 10, 64),
            ],
            32,
        )
        .unwrap()
    }

    fn flat(l: usize, ms: f64) -> Vec<LayerCompute> {
        vec![
            LayerCompute {
                forward: ms / 3e3,
                backward: 2.0 * ms / 3e3
            };
            l
        ]
    }

    #[test]
    fn free_network_is_pure_compute() {
        let m = mlp();
        for mode in SyncMode::ALL {
            let tl = Timeline::new(&m, &ClusterConfig::colocated(4, 4), mode, flat(3, 3.0));
            let r = tl.run(SimConfig::default(), 3);
            assert!((r.makespan - 3.0 * 9e-3).abs() < 1e-12, "{mode}: {}", r.makespan);
            assert!(r.stall.abs() < 1e-12);
        }
    }

    #[test]
    fn wait_free_is_not_slower() {
        let m = mlp();
        let c = ClusterConfig::disjoint(4, 1);
        let sim = SimConfig::with_bandwidth(1e8);
        let wfbp = Timeline::new(&m, &c, SyncMode::Ps, flat(3, 3.0)).run(sim, 1);
        let seq = Timeline::new(&m, &c, SyncMode::SequentialPs, flat(3, 3.0)).run(sim, 1);
        assert!(wfbp.makespan < seq.makespan, "{} vs {}", wfbp.makespan, seq.makespan);
        assert_eq!(wfbp.traffic.bytes_out, seq.traffic.bytes_out);
    }

    #[test]
    fn ps_bytes_match_the_chunk_table() {
        let m = mlp();
        let c = ClusterConfig::disjoint(2, 2);
        let tl = Timeline::new(&m, &c, SyncMode::Ps, flat(3, 1.0));
        let r = tl.run(SimConfig::with_bandwidth(1e9), 1);
        let chunks = tl.partition.num_chunks() as u64;
        let body = 4 * m.total_params() as u64;
        let total: u64 = r.worker_bytes.iter().sum();
        assert_eq!(total, 2 * 2 * (body + chunks * HEADER_BYTES as u64));
        assert_eq!(r.server_bytes.iter().sum::<u64>(), total);
        assert_eq!(r.traffic.bytes_out.iter().sum::<u64>(), total);
    }

    #[test]
    fn isolated_sync_of_one_chunk() {
        let m = ModelSpec::new(vec![LayerSpec::fully_connected(0, "fc", 1000, 250)], 8).unwrap();
        let c = ClusterConfig::disjoint(1, 1);
        let tl = Timeline::new(&m, &c, SyncMode::Ps, flat(1, 1.0));
        let t = tl.isolated_sync_time(0, SimConfig::with_bandwidth(8e6));
        let bytes = (HEADER_BYTES + 1_000_000) as f64;
        assert!((t - 2.0 * bytes / 1e6).abs() < 1e-9, "{t}");
    }
}
