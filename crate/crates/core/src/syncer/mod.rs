//! Per-layer synchronization agents.
//!
//! Every layer owns one [`Syncer`] that walks
//! `Idle -> Sent -> Received -> Applied -> Idle` once per iteration:
//! [`Syncer::move_out`] stages the layer's update, [`Syncer::send`] emits the
//! frames, [`Syncer::try_receive`] succeeds once everything the layer waits
//! for has been delivered, [`Syncer::move_in`] writes the result into the
//! engine's weights and [`Syncer::finish`] rearms it for the next
//! iteration. [`SyncSlot`] wraps a syncer with the blocking receive used by
//! the threaded runtime. [`timeline`] replays the same schedule on the
//! simulated network.

pub mod timeline;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{quantize_1bit, QuantState};
use crate::engine::LayerGrad;
use crate::kvstore::{ChunkInfo, ChunkPolicy};
use crate::modelspec::{ClusterConfig, LayerKind, LayerRange, ModelSpec};
use crate::planner::{best_scheme, CommPlan, Scheme};
use crate::sfb::{SfBatch, SfbCollector};
use crate::transport::{bytes_to_f32s, f32s_to_bytes, Frame, MsgType, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyncState {
    Idle,
    Sent,
    Received,
    Applied,
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("layer {layer}: {op} is not allowed in state {state:?}")]
    State {
        layer: usize,
        op: &'static str,
        state: SyncState,
    },
    #[error("layer {layer}: dimension mismatch: {msg}")]
    Dimension { layer: usize, msg: String },
    #[error("layer {layer}: protocol error: {msg}")]
    Protocol { layer: usize, msg: String },
    #[error("layer {layer}: timed out waiting for {waiting}")]
    Timeout { layer: usize, waiting: String },
    #[error("iteration aborted: {0}")]
    Aborted(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Training strategy selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncMode {
    /// Per-layer best scheme, wait-free.
    Hybrid,
    /// Every layer through the servers, wait-free.
    Ps,
    /// Factor broadcast for every fully-connected layer, wait-free.
    Sfb,
    /// Every layer through the servers, after the whole backward pass.
    SequentialPs,
    /// Factors pushed to one shard per layer, full matrix pulled back.
    Adam,
    /// Servers, with 1-bit quantized fully-connected updates.
    #[serde(rename = "onebit")]
    OneBit,
}

impl SyncMode {
    pub const ALL: [SyncMode; 6] = [
        SyncMode::Hybrid,
        SyncMode::Ps,
        SyncMode::Sfb,
        SyncMode::SequentialPs,
        SyncMode::Adam,
        SyncMode::OneBit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SyncMode::Hybrid => "hybrid",
            SyncMode::Ps => "ps",
            SyncMode::Sfb => "sfb",
            SyncMode::SequentialPs => "sequential-ps",
            SyncMode::Adam => "adam",
            SyncMode::OneBit => "onebit",
        }
    }

    /// Whether a layer's sync starts right after its backward step.
    pub fn wait_free(self) -> bool {
        self != SyncMode::SequentialPs
    }

    pub fn plan(self, model: &ModelSpec, cluster: &ClusterConfig) -> CommPlan {
        match self {
            SyncMode::Hybrid => CommPlan::build(model, cluster, |l| best_scheme(l, model, cluster)),
            SyncMode::Sfb => CommPlan::uniform(model, cluster, Scheme::Sfb),
            _ => CommPlan::uniform(model, cluster, Scheme::Ps),
        }
    }

    /// Transport route of every layer.
    pub fn routes(self, model: &ModelSpec, plan: &CommPlan) -> Vec<Route> {
        model
            .layers
            .iter()
            .zip(&plan.layers)
            .map(|(l, p)| match (self, p.scheme, l.kind) {
                (_, Scheme::Sfb, _) => Route::Sfb,
                (SyncMode::Adam, _, LayerKind::FullyConnected) => Route::Adam,
                _ => Route::Ps,
            })
            .collect()
    }

    /// Factor broadcast needs at least one fully-connected layer.
    pub fn check_model(self, model: &ModelSpec) -> Result<(), String> {
        if self == SyncMode::Sfb && !model.layers.iter().any(|l| l.is_fc()) {
            return Err(format!("mode {self} needs a fully-connected layer"));
        }
        Ok(())
    }

    pub fn quantizes(self, kind: LayerKind) -> bool {
        self == SyncMode::OneBit && kind == LayerKind::FullyConnected
    }
}

impl fmt::Display for SyncMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyncMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SyncMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown plan mode '{s}' (expected hybrid, ps, sfb, sequential-ps, adam or onebit)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    /// Dense deltas pushed per chunk, chunks broadcast back.
    Ps,
    /// Factors broadcast to every peer.
    Sfb,
    /// Factors pushed to the layer's shard, the whole matrix broadcast back.
    Adam,
}

impl Route {
    pub fn chunk_policy(self) -> ChunkPolicy {
        match self {
            Route::Ps => ChunkPolicy::Chunked,
            Route::Sfb => ChunkPolicy::Skip,
            Route::Adam => ChunkPolicy::Whole,
        }
    }
}

/// Where a syncer's frames go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Peer {
    Worker(usize),
    Server(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: Peer,
    pub frame: Frame,
}

/// Static description of one layer's synchronization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRouting {
    pub layer: usize,
    pub route: Route,
    pub rows: usize,
    pub cols: usize,
    pub range: LayerRange,
    /// The layer's chunks in offset order; empty for factor broadcast.
    pub chunks: Vec<ChunkInfo>,
    pub quantize: bool,
}

enum Staged {
    Dense(Vec<f32>),
    Factors(SfBatch),
}

pub struct Syncer {
    pub routing: LayerRouting,
    worker: usize,
    num_workers: usize,
    /// `lr / (K * P1)`.
    scale: f32,
    state: SyncState,
    iteration: u64,
    staged: Option<Staged>,
    received: BTreeMap<u64, Vec<f32>>,
    collector: Option<SfbCollector>,
    quant: Option<QuantState>,
    pub sync_count: u64,
}

impl Syncer {
    pub fn new(routing: LayerRouting, worker: usize, num_workers: usize, scale: f32) -> Self {
        let collector = (routing.route == Route::Sfb)
            .then(|| SfbCollector::new(routing.layer as u32, routing.rows, routing.cols, num_workers));
        let quant = routing.quantize.then(|| QuantState::new(routing.rows, routing.cols));
        Syncer {
            routing,
            worker,
            num_workers,
            scale,
            state: SyncState::Idle,
            iteration: 0,
            staged: None,
            received: BTreeMap::new(),
            collector,
            quant,
            sync_count: 0,
        }
    }

    pub fn layer(&self) -> usize {
        self.routing.layer
    }

    pub fn state(&self) -> SyncState {
        self.state
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn expect(&self, want: SyncState, op: &'static str) -> Result<(), SyncError> {
        if self.state != want {
            return Err(SyncError::State {
                layer: self.layer(),
                op,
                state: self.state,
            });
        }
        Ok(())
    }

    fn protocol(&self, msg: impl Into<String>) -> SyncError {
        SyncError::Protocol {
            layer: self.layer(),
            msg: msg.into(),
        }
    }

    /// Engine to syncer: stages this iteration's update for `grad`.
    pub fn move_out(&mut self, grad: &LayerGrad<f32>) -> Result<(), SyncError> {
        self.expect(SyncState::Idle, "move out")?;
        if self.staged.is_some() {
            return Err(SyncError::State {
                layer: self.layer(),
                op: "move out twice",
                state: self.state,
            });
        }
        let r = &self.routing;
        if grad.layer != r.layer || grad.rows != r.rows || grad.cols != r.cols {
            return Err(SyncError::Dimension {
                layer: r.layer,
                msg: format!(
                    "gradient of layer {} is {}x{}, expected {}x{}",
                    grad.layer, grad.rows, grad.cols, r.rows, r.cols
                ),
            });
        }
        let iteration = self.iteration;
        self.staged = Some(match r.route {
            Route::Ps => {
                let delta: Vec<f32> = grad.grad.iter().map(|&g| self.scale * g).collect();
                match self.quant.as_mut() {
                    Some(q) => Staged::Dense(
                        quantize_1bit(&delta, q)
                            .map_err(|e| SyncError::Dimension {
                                layer: r.layer,
                                msg: e.to_string(),
                            })?
                            .dequantize(),
                    ),
                    None => Staged::Dense(delta),
                }
            }
            Route::Sfb | Route::Adam => Staged::Factors(grad.to_sf_batch(iteration, self.worker as u32)),
        });
        Ok(())
    }

    /// Emits the staged update. Nothing here waits on the network.
    pub fn send(&mut self) -> Result<Vec<Outbound>, SyncError> {
        self.expect(SyncState::Idle, "send")?;
        let staged = self.staged.take().ok_or(SyncError::State {
            layer: self.layer(),
            op: "send before move out",
            state: self.state,
        })?;
        let r = &self.routing;
        let out = match (r.route, staged) {
            (Route::Ps, Staged::Dense(delta)) => r
                .chunks
                .iter()
                .map(|c| {
                    let off = c.offset_in(&r.range);
                    Outbound {
                        to: Peer::Server(c.server),
                        frame: Frame {
                            msg_type: MsgType::PushChunk,
                            layer: r.layer as u32,
                            chunk_id: c.id,
                            iteration: self.iteration,
                            origin: self.worker as u32,
                            payload: f32s_to_bytes(&delta[off..off + c.len]),
                        },
                    }
                })
                .collect(),
            (Route::Adam, Staged::Factors(batch)) => {
                let c = r.chunks.first().ok_or_else(|| self.protocol("layer has no shard"))?;
                let mut frame = batch.to_frame();
                frame.chunk_id = c.id;
                vec![Outbound {
                    to: Peer::Server(c.server),
                    frame,
                }]
            }
            (Route::Sfb, Staged::Factors(batch)) => {
                let frame = batch.to_frame();
                let out = (0..self.num_workers)
                    .filter(|&w| w != self.worker)
                    .map(|w| Outbound {
                        to: Peer::Worker(w),
                        frame: frame.clone(),
                    })
                    .collect();
                let layer = self.layer();
                self.collector
                    .as_mut()
                    .expect("factor route has a collector")
                    .insert(batch)
                    .map_err(|e| SyncError::Protocol {
                        layer,
                        msg: e.to_string(),
                    })?;
                out
            }
            _ => unreachable!("staging matches the route"),
        };
        self.state = SyncState::Sent;
        Ok(out)
    }

    /// Accepts a frame addressed to this layer, in any state.
    pub fn deliver(&mut self, frame: Frame) -> Result<(), SyncError> {
        match (self.routing.route, frame.msg_type) {
            (Route::Ps | Route::Adam, MsgType::BroadcastChunk) => {
                if frame.iteration != self.iteration || self.state == SyncState::Applied {
                    return Err(self.protocol(format!(
                        "chunk {} for iteration {} while at iteration {}",
                        frame.chunk_id, frame.iteration, self.iteration
                    )));
                }
                let Some(c) = self.routing.chunks.iter().find(|c| c.id == frame.chunk_id) else {
                    return Err(self.protocol(format!("chunk {} is not part of this layer", frame.chunk_id)));
                };
                let values = bytes_to_f32s(&frame.payload)
                    .filter(|v| v.len() == c.len)
                    .ok_or_else(|| self.protocol(format!("chunk {} payload has the wrong size", c.id)))?;
                if self.received.insert(c.id, values).is_some() {
                    return Err(self.protocol(format!("duplicate broadcast of chunk {}", frame.chunk_id)));
                }
                Ok(())
            }
            (Route::Sfb, MsgType::SfBatch) => {
                let layer = self.layer();
                let batch = SfBatch::from_frame(&frame).map_err(|e| SyncError::Protocol {
                    layer,
                    msg: e.to_string(),
                })?;
                if batch.origin as usize == self.worker {
                    return Err(self.protocol("own factors echoed back"));
                }
                self.collector
                    .as_mut()
                    .expect("factor route has a collector")
                    .insert(batch)
                    .map_err(|e| SyncError::Protocol {
                        layer,
                        msg: e.to_string(),
                    })
            }
            (route, t) => Err(self.protocol(format!("{t:?} frame on a {route:?} layer"))),
        }
    }

    fn complete(&self) -> bool {
        match &self.collector {
            Some(c) => c.is_complete(),
            None => self.received.len() == self.routing.chunks.len(),
        }
    }

    /// What the layer is still waiting for.
    pub fn waiting_for(&self) -> String {
        match &self.collector {
            Some(c) => format!("factors from workers {:?}", c.missing()),
            None => {
                let missing: Vec<u64> = self
                    .routing
                    .chunks
                    .iter()
                    .map(|c| c.id)
                    .filter(|id| !self.received.contains_key(id))
                    .collect();
                format!("chunks {missing:?}")
            }
        }
    }

    /// `Sent -> Received` once every expected message is in. Returns
    /// whether the transition happened.
    pub fn try_receive(&mut self) -> Result<bool, SyncError> {
        self.expect(SyncState::Sent, "receive")?;
        if self.complete() {
            self.state = SyncState::Received;
        }
        Ok(self.state == SyncState::Received)
    }

    /// Syncer to engine: writes the synchronized layer into `params`.
    pub fn move_in(&mut self, params: &mut [f32]) -> Result<(), SyncError> {
        self.expect(SyncState::Received, "move in")?;
        let r = &self.routing;
        if params.len() != r.rows * r.cols {
            return Err(SyncError::Dimension {
                layer: r.layer,
                msg: format!("{} parameters for a {}x{} layer", params.len(), r.rows, r.cols),
            });
        }
        match self.collector.as_mut() {
            Some(c) => c.apply_all(params, self.scale).map_err(|e| SyncError::Protocol {
                layer: r.layer,
                msg: e.to_string(),
            })?,
            None => {
                for c in &r.chunks {
                    let off = c.offset_in(&r.range);
                    params[off..off + c.len].copy_from_slice(&self.received[&c.id]);
                }
            }
        }
        self.received.clear();
        self.sync_count += 1;
        self.state = SyncState::Applied;
        Ok(())
    }

    /// `Applied -> Idle`, moving on to the next iteration.
    pub fn finish(&mut self) -> Result<(), SyncError> {
        self.expect(SyncState::Applied, "finish")?;
        self.iteration += 1;
        self.state = SyncState::Idle;
        Ok(())
    }
}

/// Bitset with one bit per syncer.
#[derive(Debug)]
pub struct CompletionVector {
    bits: Vec<AtomicU64>,
    len: usize,
}

impl CompletionVector {
    pub fn new(len: usize) -> Self {
        CompletionVector {
            bits: (0..len.div_ceil(64)).map(|_| AtomicU64::new(0)).collect(),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&self, i: usize) {
        assert!(i < self.len, "bit {i} out of range");
        self.bits[i / 64].fetch_or(1 << (i % 64), Ordering::AcqRel);
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i / 64].load(Ordering::Acquire) >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.bits
            .iter()
            .map(|b| b.load(Ordering::Acquire).count_ones() as usize)
            .sum()
    }

    pub fn all_set(&self) -> bool {
        self.count() == self.len
    }

    pub fn reset(&self) {
        self.bits.iter().for_each(|b| b.store(0, Ordering::Release));
    }
}

/// Iteration counter guarded by the completion vector.
#[derive(Debug)]
pub struct IterationClock {
    pub iteration: u64,
    pub c: CompletionVector,
}

impl IterationClock {
    pub fn new(syncers: usize) -> Self {
        IterationClock {
            iteration: 0,
            c: CompletionVector::new(syncers),
        }
    }

    /// Moves to the next iteration; fails while any syncer is unfinished.
    pub fn advance(&mut self) -> Result<u64, SyncError> {
        if !self.c.all_set() {
            let pending: Vec<usize> = (0..self.c.len()).filter(|&i| !self.c.get(i)).collect();
            return Err(SyncError::Aborted(format!("layers {pending:?} have not synchronized")));
        }
        self.c.reset();
        self.iteration += 1;
        Ok(self.iteration)
    }
}

/// A syncer shared between the frame router and one sync job.
pub struct SyncSlot {
    pub syncer: Mutex<Syncer>,
    cv: Condvar,
}

impl SyncSlot {
    pub fn new(syncer: Syncer) -> Self {
        SyncSlot {
            syncer: Mutex::new(syncer),
            cv: Condvar::new(),
        }
    }

    pub fn lock(&self) -> std::sync::MutexGuard<'_, Syncer> {
        self.syncer.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn deliver(&self, frame: Frame) -> Result<(), SyncError> {
        let r = self.lock().deliver(frame);
        self.cv.notify_all();
        r
    }

    /// Wakes waiters so they can observe an abort.
    pub fn wake(&self) {
        self.cv.notify_all();
    }

    /// Blocking receive: waits until the layer is complete, `abort` is set
    /// or `timeout` passes.
    pub fn receive(&self, timeout: Duration, abort: &AtomicBool) -> Result<(), SyncError> {
        let deadline = Instant::now() + timeout;
        let mut s = self.lock();
        loop {
            if s.try_receive()? {
                return Ok(());
            }
            if abort.load(Ordering::Acquire) {
                return Err(SyncError::Aborted(format!("layer {} stopped while waiting", s.layer())));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(SyncError::Timeout {
                    layer: s.layer(),
                    waiting: s.waiting_for(),
                });
            }
            let wait = (deadline - now).min(Duration::from_millis(100));
            s = self.cv.wait_timeout(s, wait).unwrap_or_else(|e| e.into_inner()).0;
        }
    }
}

/// Routing for every layer given a partition built from the same routes.
pub fn layer_routings(
    model: &ModelSpec,
    routes: &[Route],
    partition: &crate::kvstore::Partition,
    mode: SyncMode,
) -> Vec<LayerRouting> {
    let ranges = crate::modelspec::flatten_offsets(model);
    model
        .layers
        .iter()
        .zip(routes)
        .zip(ranges)
        .map(|((l, &route), range)| LayerRouting {
            layer: l.index,
            route,
            rows: l.rows(),
            cols: l.cols(),
            range,
            chunks: partition
                .layer_chunks(l.index)
                .iter()
                .map(|&id| *partition.chunk(id).unwrap())
                .collect(),
            quantize: route == Route::Ps && mode.quantizes(l.kind),
        })
        .collect()
}
