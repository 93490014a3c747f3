//! Randomized delivery-order harness for the server protocol.
//!
//! Scripted workers push seeded deltas for every chunk, occasionally twice,
//! over a [`SimNetwork`] in reorder mode. Real [`ServerRole`]s handle the
//! frames. The harness checks every broadcast against the set of pushes
//! actually delivered and against an exact-sum reference.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::server::ServerRole;
use super::{ChunkPolicy, KvError, Partition, Shard};
use crate::modelspec::LayerRange;
use crate::transport::sim::{SimConfig, SimEvent, SimNetwork};
use crate::transport::{bytes_to_f32s, f32s_to_bytes, Frame, MsgType};

#[derive(Debug, Clone)]
pub struct BspFuzzConfig {
    pub workers: usize,
    pub servers: usize,
    pub layer_sizes: Vec<usize>,
    pub chunk_elements: usize,
    pub iterations: u64,
    /// Seeds initial values and deltas; fixed across trials.
    pub data_seed: u64,
    /// Seeds delivery jitter and duplicate injection.
    pub order_seed: u64,
    pub duplicate_prob: f64,
    pub latency: f64,
    pub bandwidth_bits_per_sec: Option<f64>,
}

impl Default for BspFuzzConfig {
    fn default() -> Self {
        BspFuzzConfig {
            workers: 4,
            servers: 3,
            layer_sizes: vec![37, 64, 5],
            chunk_elements: 16,
            iterations: 4,
            data_seed: 1,
            order_seed: 0,
            duplicate_prob: 0.1,
            latency: 1e-3,
            bandwidth_bits_per_sec: Some(1e7),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BspFuzzReport {
    pub broadcasts: usize,
    pub duplicates_sent: usize,
    pub duplicates_rejected: usize,
    /// Broadcasts emitted before every worker's push had been delivered.
    pub premature_broadcasts: usize,
    /// Broadcasts whose values differ from the exact reference by more than
    /// 1e-6 relative.
    pub value_mismatches: usize,
    /// Any other protocol failure.
    pub errors: Vec<String>,
    /// Flattened parameters held by the servers at the end.
    pub final_params: Vec<f32>,
    pub order_fingerprint: Vec<(usize, u64)>,
}

impl BspFuzzReport {
    pub fn is_clean(&self) -> bool {
        self.premature_broadcasts == 0
            && self.value_mismatches == 0
            && self.errors.is_empty()
            && self.duplicates_rejected == self.duplicates_sent
    }
}

fn delta(seed: u64, worker: usize, iteration: u64, chunk: u64, len: usize) -> Vec<f32> {
    let key = seed
        ^ (worker as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ iteration.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ chunk.wrapping_mul(0x1656_67B1_9E37_79F9);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Runs one trial.
pub fn run_bsp_fuzz(cfg: &BspFuzzConfig) -> BspFuzzReport {
    let mut ranges = Vec::new();
    let mut start = 0;
    for &len in &cfg.layer_sizes {
        ranges.push(LayerRange { start, len });
        start += len;
    }
    let total = start;
    let partition = Partition::build(
        &ranges,
        &vec![ChunkPolicy::Chunked; ranges.len()],
        cfg.chunk_elements,
        cfg.servers,
    );
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let init: Vec<f32> = (0..total).map(|_| init_rng.random_range(-1.0f32..1.0)).collect();
    let mut servers: Vec<ServerRole> = (0..cfg.servers)
        .map(|s| ServerRole::new(Shard::new(s, &partition, cfg.workers, &init), &partition, 1.0))
        .collect();

    // Exact reference per chunk, accumulated in f64.
    let mut reference: Vec<Vec<f64>> = partition
        .chunks
        .iter()
        .map(|c| init[c.start..c.start + c.len].iter().map(|&x| x as f64).collect())
        .collect();
    let mut ref_iter = vec![0u64; partition.num_chunks()];

    let sim = SimConfig {
        bandwidth_bits_per_sec: cfg.bandwidth_bits_per_sec,
        latency: cfg.latency,
        seed: cfg.order_seed,
        reorder: true,
    };
    let server_node = |s: usize| cfg.workers + s;
    let mut net = SimNetwork::<Frame>::new(cfg.workers + cfg.servers, sim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.order_seed.wrapping_add(0x5EED));
    let mut report = BspFuzzReport::default();

    let mut worker_iter = vec![0u64; cfg.workers];
    let mut pending: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); cfg.workers];
    let mut delivered: BTreeMap<(u64, u64), BTreeSet<usize>> = BTreeMap::new();

    let start_iteration = |w: usize,
                           t: u64,
                           net: &mut SimNetwork<Frame>,
                           rng: &mut ChaCha8Rng,
                           report: &mut BspFuzzReport,
                           pending: &mut Vec<BTreeSet<u64>>| {
        let mut order: Vec<u64> = (0..partition.num_chunks() as u64).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        pending[w] = order.iter().copied().collect();
        for id in order {
            let c = partition.chunk(id).unwrap();
            let frame = Frame {
                msg_type: MsgType::PushChunk,
                layer: c.layer as u32,
                chunk_id: id,
                iteration: t,
                origin: w as u32,
                payload: f32s_to_bytes(&delta(cfg.data_seed, w, t, id, c.len)),
            };
            let copies = if rng.random_bool(cfg.duplicate_prob) { 2 } else { 1 };
            report.duplicates_sent += copies - 1;
            for _ in 0..copies {
                net.send(w, server_node(c.server), frame.clone()).expect("open link");
            }
        }
    };

    for w in 0..cfg.workers {
        start_iteration(w, 0, &mut net, &mut rng, &mut report, &mut pending);
    }

    while let Some(ev) = net.next_event() {
        let SimEvent::Delivered { src, dst, at, msg, .. } = ev else {
            continue;
        };
        report.order_fingerprint.push((src, msg.chunk_id));
        if dst >= cfg.workers {
            let s = dst - cfg.workers;
            let key = (msg.chunk_id, msg.iteration);
            let origin = msg.origin as usize;
            let first_delivery = !delivered.get(&key).is_some_and(|d| d.contains(&origin));
            match servers[s].on_frame(&msg, at) {
                Ok(out) => {
                    if !first_delivery {
                        report.errors.push(format!("duplicate push accepted for {key:?}"));
                    }
                    delivered.entry(key).or_default().insert(origin);
                    if !out.is_empty() {
                        let d = delivered.get(&key).map_or(0, |d| d.len());
                        if d != cfg.workers {
                            report.premature_broadcasts += 1;
                        }
                        report.broadcasts += 1;
                        let id = msg.chunk_id as usize;
                        let c = partition.chunk(msg.chunk_id).unwrap();
                        if ref_iter[id] != msg.iteration {
                            report.errors.push(format!("broadcast for {key:?} out of sequence"));
                        }
                        for w in 0..cfg.workers {
                            let d = delta(cfg.data_seed, w, msg.iteration, msg.chunk_id, c.len);
                            for (r, x) in reference[id].iter_mut().zip(d) {
                                *r += x as f64;
                            }
                        }
                        ref_iter[id] += 1;
                    }
                    for o in out {
                        net.send(dst, o.worker, o.frame).expect("open link");
                    }
                }
                Err(KvError::Duplicate { .. } | KvError::StaleUpdate { .. }) if !first_delivery => {
                    report.duplicates_rejected += 1;
                }
                Err(e) => report.errors.push(e.to_string()),
            }
        } else {
            let w = dst;
            if msg.msg_type != MsgType::BroadcastChunk {
                report.errors.push(format!("worker {w} got {:?}", msg.msg_type));
                continue;
            }
            if msg.iteration != worker_iter[w] || !pending[w].remove(&msg.chunk_id) {
                report.errors.push(format!(
                    "worker {w} at iteration {} got chunk {} for iteration {}",
                    worker_iter[w], msg.chunk_id, msg.iteration
                ));
                continue;
            }
            let values = bytes_to_f32s(&msg.payload).unwrap_or_default();
            let want = &reference[msg.chunk_id as usize];
            let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
            let diff = values
                .iter()
                .zip(want)
                .fold(0.0f64, |m, (a, b)| m.max((*a as f64 - b).abs()));
            if values.len() != want.len() || diff / scale > 1e-6 {
                report.value_mismatches += 1;
            }
            if pending[w].is_empty() {
                worker_iter[w] += 1;
                if worker_iter[w] < cfg.iterations {
                    start_iteration(w, worker_iter[w], &mut net, &mut rng, &mut report, &mut pending);
                }
            }
        }
    }
    if worker_iter.iter().any(|&t| t != cfg.iterations) {
        report
            .errors
            .push(format!("workers stopped at iterations {worker_iter:?}"));
    }

    let mut final_params = vec![0.0f32; total];
    for s in &servers {
        for c in s.shard.chunks() {
            final_params[c.info.start..c.info.start + c.info.len].copy_from_slice(&c.values);
        }
    }
    report.final_params = final_params;
    report
}
