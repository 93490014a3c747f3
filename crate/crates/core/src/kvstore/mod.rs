//! Sharded bulk-synchronous parameter store.
//!
//! Layers synchronized through servers are cut into chunks of at most
//! `chunk_bytes`. Chunks never straddle a layer boundary, so a layer's
//! chunks can be pushed as soon as that layer's gradient exists. A chunk
//! collects one additive update per live worker per iteration and is then
//! broadcast.

pub mod bsp_sim;
pub mod server;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modelspec::{flatten_offsets, ClusterConfig, LayerRange, ModelSpec, ELEMENT_BYTES};
use crate::planner::{CommPlan, Scheme};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSDN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("stale update for chunk {chunk}: chunk is at iteration {expected}, update is for {got}")]
    StaleUpdate { chunk: u64, expected: u64, got: u64 },
    #[error("duplicate update for chunk {chunk} from worker {origin} at iteration {iteration}")]
    Duplicate { chunk: u64, origin: usize, iteration: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("chunk {0} is not stored on this shard")]
    UnknownChunk(u64),
    #[error("checkpoint does not match the partition: {0}")]
    RangeMismatch(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("chunk {0} has updates in flight")]
    Busy(u64),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// How a layer is stored on the servers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkPolicy {
    /// Not stored on servers.
    Skip,
    /// Cut into chunks spread over all servers.
    Chunked,
    /// Kept as one chunk on a single designated server.
    Whole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub id: u64,
    pub layer: usize,
    /// Offset in the flattened parameter vector.
    pub start: usize,
    pub len: usize,
    pub server: usize,
}

impl ChunkInfo {
    pub fn bytes(&self) -> u64 {
        (self.len * ELEMENT_BYTES) as u64
    }

    /// Offset within the owning layer.
    pub fn offset_in(&self, layer: &LayerRange) -> usize {
        self.start - layer.start
    }
}

/// Chunk table plus the chunk-to-server assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub chunk_elements: usize,
    pub servers: usize,
    /// Indexed by chunk id.
    pub chunks: Vec<ChunkInfo>,
    /// Chunk ids of each layer, in offset order.
    pub layer_chunks: Vec<Vec<u64>>,
    pub policies: Vec<ChunkPolicy>,
}

impl Partition {
    /// Cuts layers according to `policies` and assigns chunks to servers.
    ///
    /// Full-size chunks are dealt round-robin. Shorter tail chunks follow in
    /// decreasing size, each going to the server with the fewest chunks
    /// (then fewest bytes). Whole layers go round-robin over servers in
    /// layer order.
    pub fn build(ranges: &[LayerRange], policies: &[ChunkPolicy], chunk_elements: usize, servers: usize) -> Partition {
        assert!(chunk_elements >= 1 && servers >= 1);
        assert_eq!(ranges.len(), policies.len());
        let mut chunks = Vec::new();
        let mut layer_chunks = vec![Vec::new(); ranges.len()];
        for (layer, (r, p)) in ranges.iter().zip(policies).enumerate() {
            let piece = match p {
                ChunkPolicy::Skip => continue,
                ChunkPolicy::Chunked => chunk_elements,
                ChunkPolicy::Whole => r.len.max(1),
            };
            let mut off = 0;
            while off < r.len {
                let len = piece.min(r.len - off);
                let id = chunks.len() as u64;
                chunks.push(ChunkInfo {
                    id,
                    layer,
                    start: r.start + off,
                    len,
                    server: 0,
                });
                layer_chunks[layer].push(id);
                off += len;
            }
        }

        let mut count = vec![0usize; servers];
        let mut bytes = vec![0usize; servers];
        let mut next = 0;
        let (mut tails, mut wholes) = (Vec::new(), Vec::new());
        for c in chunks.iter_mut() {
            match policies[c.layer] {
                ChunkPolicy::Whole => wholes.push(c.id),
                _ if c.len == chunk_elements => {
                    c.server = next;
                    count[next] += 1;
                    bytes[next] += c.len;
                    next = (next + 1) % servers;
                }
                _ => tails.push(c.id),
            }
        }
        tails.sort_by_key(|&id| (std::cmp::Reverse(chunks[id as usize].len), id));
        for id in tails {
            let s = (0..servers).min_by_key(|&s| (count[s], bytes[s], s)).unwrap();
            let c = &mut chunks[id as usize];
            c.server = s;
            count[s] += 1;
            bytes[s] += c.len;
        }
        for (i, id) in wholes.into_iter().enumerate() {
            chunks[id as usize].server = i % servers;
        }
        Partition {
            chunk_elements,
            servers,
            chunks,
            layer_chunks,
            policies: policies.to_vec(),
        }
    }

    pub fn chunk(&self, id: u64) -> Option<&ChunkInfo> {
        self.chunks.get(id as usize)
    }

    pub fn layer_chunks(&self, layer: usize) -> &[u64] {
        &self.layer_chunks[layer]
    }

    /// Server index of every chunk, by chunk id.
    pub fn assignment(&self) -> Vec<usize> {
        self.chunks.iter().map(|c| c.server).collect()
    }

    pub fn chunks_on(&self, server: usize) -> impl Iterator<Item = &ChunkInfo> {
        self.chunks.iter().filter(move |c| c.server == server)
    }

    pub fn server_counts(&self) -> Vec<usize> {
        let mut v = vec![0; self.servers];
        for c in &self.chunks {
            v[c.server] += 1;
        }
        v
    }

    pub fn server_bytes(&self) -> Vec<u64> {
        let mut v = vec![0; self.servers];
        for c in &self.chunks {
            v[c.server] += c.bytes();
        }
        v
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }
}

/// Chunks every PS layer of `plan`; SFB layers get no chunks.
pub fn partition(model: &ModelSpec, cluster: &ClusterConfig, plan: &CommPlan) -> Partition {
    let policies: Vec<ChunkPolicy> = plan
        .layers
        .iter()
        .map(|l| match l.scheme {
            Scheme::Ps => ChunkPolicy::Chunked,
            Scheme::Sfb => ChunkPolicy::Skip,
        })
        .collect();
    partition_with(model, cluster, &policies)
}

pub fn partition_with(model: &ModelSpec, cluster: &ClusterConfig, policies: &[ChunkPolicy]) -> Partition {
    Partition::build(
        &flatten_offsets(model),
        policies,
        cluster.chunk_elements(),
        cluster.num_servers(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvChunk {
    pub info: ChunkInfo,
    pub values: Vec<f32>,
    pub update_count: usize,
    pub iteration: u64,
    reported: Vec<bool>,
    dropped: Vec<bool>,
    prev_dropped: Vec<bool>,
    first_update_at: Option<f64>,
}

impl KvChunk {
    fn new(info: ChunkInfo, values: Vec<f32>, iteration: u64, workers: usize) -> Self {
        KvChunk {
            info,
            values,
            update_count: 0,
            iteration,
            reported: vec![false; workers],
            dropped: vec![false; workers],
            prev_dropped: vec![false; workers],
            first_update_at: None,
        }
    }

    /// Workers expected this iteration.
    pub fn live_workers(&self) -> usize {
        self.dropped.iter().filter(|d| !**d).count()
    }

    pub fn has_reported(&self, worker: usize) -> bool {
        self.reported[worker]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// A worker dropped as a straggler reported late; the update was ignored.
    Discarded,
}

/// Fresh parameters of one chunk after all live updates of `iteration`.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub chunk_id: u64,
    pub layer: usize,
    pub iteration: u64,
    pub values: Vec<f32>,
    pub recipients: Vec<usize>,
}

/// One server's chunks.
#[derive(Debug, Clone)]
pub struct Shard {
    pub index: usize,
    pub num_workers: usize,
    chunks: std::collections::BTreeMap<u64, KvChunk>,
    /// Seconds after the first update of an iteration before missing
    /// workers are dropped. `None` waits forever.
    pub straggler_deadline: Option<f64>,
}

impl Shard {
    /// Builds shard `index` with values taken from the flattened `params`.
    pub fn new(index: usize, partition: &Partition, num_workers: usize, params: &[f32]) -> Shard {
        let chunks = partition
            .chunks_on(index)
            .map(|c| {
                let values = params[c.start..c.start + c.len].to_vec();
                (c.id, KvChunk::new(*c, values, 0, num_workers))
            })
            .collect();
        Shard {
            index,
            num_workers,
            chunks,
            straggler_deadline: None,
        }
    }

    pub fn with_straggler_deadline(mut self, seconds: Option<f64>) -> Self {
        self.straggler_deadline = seconds;
        self
    }

    pub fn chunk(&self, id: u64) -> Option<&KvChunk> {
        self.chunks.get(&id)
    }

    pub fn chunks(&self) -> impl Iterator<Item = &KvChunk> {
        self.chunks.values()
    }

    fn chunk_mut(&mut self, id: u64) -> Result<&mut KvChunk, KvError> {
        self.chunks.get_mut(&id).ok_or(KvError::UnknownChunk(id))
    }

    /// Adds `delta` to the chunk. `now` (seconds, caller's clock) starts the
    /// straggler deadline on the first update of an iteration.
    pub fn receive_update(
        &mut self,
        chunk_id: u64,
        iteration: u64,
        origin: usize,
        delta: &[f32],
        now: f64,
    ) -> Result<UpdateOutcome, KvError> {
        let workers = self.num_workers;
        let c = self.chunk_mut(chunk_id)?;
        if origin >= workers {
            return Err(KvError::Protocol(format!("update from unknown worker {origin}")));
        }
        if iteration != c.iteration {
            if iteration + 1 == c.iteration && c.prev_dropped[origin] {
                return Ok(UpdateOutcome::Discarded);
            }
            return Err(KvError::StaleUpdate {
                chunk: chunk_id,
                expected: c.iteration,
                got: iteration,
            });
        }
        if c.dropped[origin] {
            return Ok(UpdateOutcome::Discarded);
        }
        if delta.len() != c.info.len {
            return Err(KvError::Protocol(format!(
                "chunk {chunk_id} has {} elements, update has {}",
                c.info.len,
                delta.len()
            )));
        }
        if c.reported[origin] {
            return Err(KvError::Duplicate {
                chunk: chunk_id,
                origin,
                iteration,
            });
        }
        for (v, d) in c.values.iter_mut().zip(delta) {
            *v += *d;
        }
        c.reported[origin] = true;
        c.update_count += 1;
        c.first_update_at.get_or_insert(now);
        Ok(UpdateOutcome::Applied)
    }

    /// Emits the chunk's values once every live worker has reported, then
    /// opens the next iteration.
    pub fn maybe_broadcast(&mut self, chunk_id: u64) -> Option<Broadcast> {
        let workers = self.num_workers;
        let c = self.chunks.get_mut(&chunk_id)?;
        if c.update_count == 0 || c.update_count != c.live_workers() {
            return None;
        }
        let b = Broadcast {
            chunk_id,
            layer: c.info.layer,
            iteration: c.iteration,
            values: c.values.clone(),
            recipients: (0..workers).collect(),
        };
        c.iteration += 1;
        c.update_count = 0;
        c.first_update_at = None;
        c.reported.iter_mut().for_each(|r| *r = false);
        c.prev_dropped = std::mem::replace(&mut c.dropped, vec![false; workers]);
        Some(b)
    }

    /// Excludes `worker` from the current iteration of `chunk_id`.
    pub fn drop_worker(&mut self, chunk_id: u64, worker: usize) -> Result<(), KvError> {
        let c = self.chunk_mut(chunk_id)?;
        if c.reported[worker] {
            return Err(KvError::Protocol(format!("worker {worker} already reported")));
        }
        c.dropped[worker] = true;
        Ok(())
    }

    /// Drops every worker that has not reported within the deadline and
    /// returns the broadcasts that became ready.
    pub fn expire_stragglers(&mut self, now: f64) -> Vec<Broadcast> {
        let Some(deadline) = self.straggler_deadline else {
            return Vec::new();
        };
        let mut ready = Vec::new();
        for c in self.chunks.values_mut() {
            let Some(first) = c.first_update_at else { continue };
            if now - first < deadline {
                continue;
            }
            for w in 0..c.reported.len() {
                if !c.reported[w] && !c.dropped[w] {
                    log::info!(
                        "dropping straggler {w} on chunk {} iteration {}",
                        c.info.id,
                        c.iteration
                    );
                    c.dropped[w] = true;
                }
            }
            ready.push(c.info.id);
        }
        ready.into_iter().filter_map(|id| self.maybe_broadcast(id)).collect()
    }

    /// Earliest time at which [`Shard::expire_stragglers`] can drop someone.
    pub fn next_deadline(&self) -> Option<f64> {
        let d = self.straggler_deadline?;
        self.chunks
            .values()
            .filter_map(|c| c.first_update_at)
            .map(|t| t + d)
            .min_by(f64::total_cmp)
    }

    /// Writes every chunk to `path`. Fails while any chunk has updates for
    /// an unfinished iteration.
    pub fn checkpoint(&self, path: impl AsRef<Path>) -> Result<(), KvError> {
        if let Some(c) = self.chunks.values().find(|c| c.update_count > 0) {
            return Err(KvError::Busy(c.info.id));
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.chunks.len() as u32).to_le_bytes())?;
        for c in self.chunks.values() {
            for x in [c.info.id, c.info.start as u64, c.info.len as u64, c.iteration] {
                w.write_all(&x.to_le_bytes())?;
            }
            for v in &c.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds shard `index` of `partition` from a checkpoint.
    pub fn restore(
        path: impl AsRef<Path>,
        partition: &Partition,
        index: usize,
        num_workers: usize,
    ) -> Result<Shard, KvError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(KvError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(KvError::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let expected: Vec<&ChunkInfo> = partition.chunks_on(index).collect();
        if count != expected.len() {
            return Err(KvError::RangeMismatch(format!(
                "checkpoint has {count} chunks, shard {index} owns {}",
                expected.len()
            )));
        }
        let mut chunks = std::collections::BTreeMap::new();
        for info in expected {
            let id = read_u64(&mut r)?;
            let start = read_u64(&mut r)? as usize;
            let len = read_u64(&mut r)? as usize;
            let iteration = read_u64(&mut r)?;
            if (id, start, len) != (info.id, info.start, info.len) {
                return Err(KvError::RangeMismatch(format!(
                    "chunk {id} at ({start}, {len}), expected chunk {} at ({}, {})",
                    info.id, info.start, info.len
                )));
            }
            let mut buf = vec![0u8; len * ELEMENT_BYTES];
            r.read_exact(&mut buf)?;
            let values = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            chunks.insert(id, KvChunk::new(*info, values, iteration, num_workers));
        }
        Ok(Shard {
            index,
            num_workers,
            chunks,
            straggler_deadline: None,
        })
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelspec::LayerSpec;
    use proptest::prelude::*;

    fn single(len: usize, chunk: usize, servers: usize) -> Partition {
        Partition::build(&[LayerRange { start: 0, len }], &[ChunkPolicy::Chunked], chunk, servers)
    }

    #[test]
    fn two_full_chunks_on_two_servers() {
        let p = single(1_048_576, 524_288, 2);
        assert_eq!(p.num_chunks(), 2);
        assert_eq!(p.server_counts(), vec![1, 1]);
    }

    #[test]
    fn tiny_model_single_chunk() {
        let p = single(10, 524_288, 1);
        assert_eq!(
            p.chunks,
            vec![ChunkInfo {
                id: 0,
                layer: 0,
                start: 0,
                len: 10,
                server: 0
            }]
        );
    }

    #[test]
    fn vgg_sized_vector_makes_273_chunks() {
        let p = single(143_000_000, 524_288, 8);
        assert_eq!(p.num_chunks(), 273);
        let counts = p.server_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn sfb_layers_are_not_chunked() {
        let model = ModelSpec::new(
            vec![
                LayerSpec::opaque(0, "conv", 1000),
                LayerSpec::fully_connected(1, "fc", 4096, 4096),
            ],
            32,
        )
        .unwrap();
        let cluster = ClusterConfig::colocated(8, 8);
        let plan = crate::planner::plan(&model, &cluster);
        let p = partition(&model, &cluster, &plan);
        assert_eq!(p.layer_chunks(0).len(), 1);
        assert!(p.layer_chunks(1).is_empty());
    }

    fn shard2() -> Shard {
        let p = single(2, 4, 1);
        Shard::new(0, &p, 2, &[1.0, 2.0])
    }

    #[test]
    fn update_then_broadcast() {
        let mut s = shard2();
        assert_eq!(
            s.receive_update(0, 0, 0, &[0.5, -1.0], 0.0).unwrap(),
            UpdateOutcome::Applied
        );
        assert_eq!(s.chunk(0).unwrap().values, vec![1.5, 1.0]);
        assert_eq!(s.chunk(0).unwrap().update_count, 1);
        assert!(s.maybe_broadcast(0).is_none());
        s.receive_update(0, 0, 1, &[0.5, 0.0], 0.0).unwrap();
        let b = s.maybe_broadcast(0).unwrap();
        assert_eq!(b.values, vec![2.0, 1.0]);
        assert_eq!(b.iteration, 0);
        assert_eq!(b.recipients, vec![0, 1]);
        let c = s.chunk(0).unwrap();
        assert_eq!((c.update_count, c.iteration), (0, 1));
        assert!(s.maybe_broadcast(0).is_none());
    }

    #[test]
    fn update_errors() {
        let mut s = shard2();
        assert!(matches!(
            s.receive_update(0, 0, 0, &[1.0], 0.0),
            Err(KvError::Protocol(_))
        ));
        assert!(matches!(
            s.receive_update(0, 3, 0, &[1.0, 1.0], 0.0),
            Err(KvError::StaleUpdate {
                expected: 0,
                got: 3,
                ..
            })
        ));
        s.receive_update(0, 0, 0, &[1.0, 1.0], 0.0).unwrap();
        assert!(matches!(
            s.receive_update(0, 0, 0, &[1.0, 1.0], 0.0),
            Err(KvError::Duplicate { .. })
        ));
        assert_eq!(s.chunk(0).unwrap().values, vec![2.0, 3.0]);
        assert!(matches!(
            s.receive_update(9, 0, 0, &[], 0.0),
            Err(KvError::UnknownChunk(9))
        ));
    }

    #[test]
    fn dropped_straggler_lowers_the_count() {
        let p = single(1, 4, 1);
        let mut s = Shard::new(0, &p, 3, &[0.0]).with_straggler_deadline(Some(1.0));
        s.receive_update(0, 0, 0, &[1.0], 0.0).unwrap();
        s.receive_update(0, 0, 1, &[1.0], 0.5).unwrap();
        assert!(s.maybe_broadcast(0).is_none());
        assert!(s.expire_stragglers(0.9).is_empty());
        assert_eq!(s.next_deadline(), Some(1.0));
        let b = s.expire_stragglers(1.0);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].values, vec![2.0]);
        assert_eq!(
            s.receive_update(0, 0, 2, &[100.0], 1.1).unwrap(),
            UpdateOutcome::Discarded
        );
        assert_eq!(s.chunk(0).unwrap().values, vec![2.0]);
        assert_eq!(s.chunk(0).unwrap().live_workers(), 3);
    }

    #[test]
    fn explicit_drop_broadcasts_at_reduced_count() {
        let p = single(1, 4, 1);
        let mut s = Shard::new(0, &p, 3, &[0.0]);
        s.drop_worker(0, 2).unwrap();
        s.receive_update(0, 0, 0, &[1.0], 0.0).unwrap();
        assert!(s.maybe_broadcast(0).is_none());
        s.receive_update(0, 0, 1, &[1.0], 0.0).unwrap();
        assert!(s.maybe_broadcast(0).is_some());
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shard.psdn");
        let p = single(10, 4, 2);
        let params: Vec<f32> = (0..10).map(|i| i as f32 * 0.25).collect();
        let mut s = Shard::new(1, &p, 1, &params);
        s.checkpoint(&path).unwrap();
        let back = Shard::restore(&path, &p, 1, 1).unwrap();
        for c in s.chunks() {
            assert_eq!(
                back.chunk(c.info.id).unwrap().values,
                params[c.info.start..c.info.start + c.info.len]
            );
        }
        let id = s.chunks().next().unwrap().info.id;
        s.receive_update(id, 0, 0, &vec![1.0; s.chunk(id).unwrap().info.len], 0.0)
            .unwrap();
        assert!(matches!(s.checkpoint(&path), Err(KvError::Busy(_))));
        s.maybe_broadcast(id).unwrap();
        s.checkpoint(&path).unwrap();
        let back = Shard::restore(&path, &p, 1, 1).unwrap();
        assert_eq!(back.chunk(id).unwrap().values, s.chunk(id).unwrap().values);
        assert_eq!(back.chunk(id).unwrap().iteration, 1);

        let other = single(12, 6, 2);
        assert!(matches!(
            Shard::restore(&path, &other, 1, 1),
            Err(KvError::RangeMismatch(_))
        ));
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(Shard::restore(&path, &p, 1, 1), Err(KvError::Format(_))));
    }

    fn arb_layers() -> impl Strategy<Value = (Vec<usize>, Vec<u8>, usize, usize)> {
        (
            prop::collection::vec(1usize..5000, 1..12),
            prop::collection::vec(0u8..3, 12),
            1usize..700,
            1usize..9,
        )
    }

    proptest! {
        #[test]
        fn partition_covers_exactly_the_server_layers((sizes, pol, chunk, servers) in arb_layers()) {
            let mut start = 0;
            let ranges: Vec<LayerRange> = sizes.iter().map(|&len| {
                let r = LayerRange { start, len };
                start += len;
                r
            }).collect();
            let policies: Vec<ChunkPolicy> = (0..sizes.len()).map(|i| match pol[i] {
                0 => ChunkPolicy::Skip,
                1 => ChunkPolicy::Chunked,
                _ => ChunkPolicy::Whole,
            }).collect();
            let p = Partition::build(&ranges, &policies, chunk, servers);
            for (l, r) in ranges.iter().enumerate() {
                let ids = p.layer_chunks(l);
                if policies[l] == ChunkPolicy::Skip {
                    prop_assert!(ids.is_empty());
                    continue;
                }
                let mut at = r.start;
                for &id in ids {
                    let c = p.chunk(id).unwrap();
                    prop_assert_eq!(c.start, at);
                    prop_assert_eq!(c.layer, l);
                    if policies[l] == ChunkPolicy::Chunked {
                        prop_assert!(c.len <= chunk);
                    }
                    at += c.len;
                }
                prop_assert_eq!(at, r.end());
            }
        }

        #[test]
        fn chunked_partition_is_balanced((sizes, _pol, chunk, servers) in arb_layers()) {
            let mut start = 0;
            let ranges: Vec<LayerRange> = sizes.iter().map(|&len| {
                let r = LayerRange { start, len };
                start += len;
                r
            }).collect();
            let p = Partition::build(&ranges, &vec![ChunkPolicy::Chunked; ranges.len()], chunk, servers);
            let counts = p.server_counts();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            let bytes = p.server_bytes();
            let spread = bytes.iter().max().unwrap() - bytes.iter().min().unwrap();
            prop_assert!(spread <= (chunk * ELEMENT_BYTES) as u64, "{:?}", bytes);
        }

        #[test]
        fn arrival_order_does_not_change_the_result(
            deltas in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 2..6),
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let p = single(6, 6, 1);
            let init = [0.5f32, -0.25, 1.0, 2.0, -3.0, 0.125];
            let run = |order: &[usize]| {
                let mut s = Shard::new(0, &p, deltas.len(), &init);
                for &w in order {
                    s.receive_update(0, 0, w, &deltas[w], 0.0).unwrap();
                }
                s.maybe_broadcast(0).unwrap().values
            };
            let ordered: Vec<usize> = (0..deltas.len()).collect();
            let mut shuffled = ordered.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let a = run(&ordered);
            let b = run(&shuffled);
            prop_assert!(crate::linalg::rel_error(&b, &a) <= 1e-6);
        }
    }
}
