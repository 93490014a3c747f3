//! Frame-level server role: turns pushes into shard updates and completed
//! chunks into broadcast frames. Shared by the TCP runtime and the
//! simulated harness.

use std::collections::HashMap;

use super::{Broadcast, ChunkPolicy, KvError, Partition, Shard, UpdateOutcome};
use crate::sfb::{reconstruct, SfBatch};
use crate::transport::{bytes_to_f32s, f32s_to_bytes, Frame, MsgType};

/// A frame addressed to a worker index.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub worker: usize,
    pub frame: Frame,
}

pub struct ServerRole {
    pub shard: Shard,
    /// Scale applied to gradients rebuilt from factor pushes.
    pub sf_scale: f32,
    /// Layer -> chunk id for layers stored whole on this shard.
    whole: HashMap<u32, u64>,
}

impl ServerRole {
    pub fn new(shard: Shard, partition: &Partition, sf_scale: f32) -> Self {
        let whole = partition
            .chunks_on(shard.index)
            .filter(|c| partition.policies[c.layer] == ChunkPolicy::Whole)
            .map(|c| (c.layer as u32, c.id))
            .collect();
        ServerRole { shard, sf_scale, whole }
    }

    /// Handles one frame from worker `origin` at time `now` (seconds).
    pub fn on_frame(&mut self, frame: &Frame, now: f64) -> Result<Vec<Outgoing>, KvError> {
        let origin = frame.origin as usize;
        let (chunk_id, delta) = match frame.msg_type {
            MsgType::PushChunk => {
                let delta = bytes_to_f32s(&frame.payload)
                    .ok_or_else(|| KvError::Protocol("push payload is not a float array".into()))?;
                (frame.chunk_id, delta)
            }
            MsgType::SfBatch => {
                let chunk_id = *self.whole.get(&frame.layer).ok_or_else(|| {
                    KvError::Protocol(format!("layer {} is not stored whole on this shard", frame.layer))
                })?;
                let batch = SfBatch::from_frame(frame).map_err(|e| KvError::Protocol(e.to_string()))?;
                let g = reconstruct(&batch).map_err(|e| KvError::Protocol(e.to_string()))?;
                let s = self.sf_scale;
                (chunk_id, g.into_iter().map(|x| s * x).collect())
            }
            other => return Err(KvError::Protocol(format!("server cannot handle {other:?}"))),
        };
        let info = self.shard.chunk(chunk_id).ok_or(KvError::UnknownChunk(chunk_id))?.info;
        if info.layer as u32 != frame.layer {
            return Err(KvError::Protocol(format!(
                "chunk {chunk_id} belongs to layer {}, frame says {}",
                info.layer, frame.layer
            )));
        }
        let mut out = Vec::new();
        if self
            .shard
            .receive_update(chunk_id, frame.iteration, origin, &delta, now)?
            == UpdateOutcome::Applied
        {
            if let Some(b) = self.shard.maybe_broadcast(chunk_id) {
                out.extend(self.frames_for(b));
            }
        }
        out.extend(self.tick(now));
        Ok(out)
    }

    /// Fires straggler deadlines that have passed.
    pub fn tick(&mut self, now: f64) -> Vec<Outgoing> {
        let ready = self.shard.expire_stragglers(now);
        ready.into_iter().flat_map(|b| self.frames_for(b)).collect()
    }

    fn frames_for(&self, b: Broadcast) -> Vec<Outgoing> {
        let payload = f32s_to_bytes(&b.values);
        b.recipients
            .iter()
            .map(|&w| Outgoing {
                worker: w,
                frame: Frame {
                    msg_type: MsgType::BroadcastChunk,
                    layer: b.layer as u32,
                    chunk_id: b.chunk_id,
                    iteration: b.iteration,
                    origin: self.shard.index as u32,
                    payload: payload.clone(),
                },
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelspec::LayerRange;
    use crate::sfb::SufficientFactor;

    fn push(origin: u32, layer: u32, chunk: u64, delta: &[f32]) -> Frame {
        Frame {
            msg_type: MsgType::PushChunk,
            layer,
            chunk_id: chunk,
            iteration: 0,
            origin,
            payload: f32s_to_bytes(delta),
        }
    }

    #[test]
    fn push_push_broadcast() {
        let p = Partition::build(&[LayerRange { start: 0, len: 3 }], &[ChunkPolicy::Chunked], 8, 1);
        let mut s = ServerRole::new(Shard::new(0, &p, 2, &[0.0; 3]), &p, 1.0);
        assert!(s.on_frame(&push(0, 0, 0, &[1.0, 2.0, 3.0]), 0.0).unwrap().is_empty());
        let out = s.on_frame(&push(1, 0, 0, &[1.0, 1.0, 1.0]), 0.0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(bytes_to_f32s(&out[1].frame.payload).unwrap(), vec![2.0, 3.0, 4.0]);
        assert_eq!(out[1].worker, 1);
        assert!(matches!(
            s.on_frame(&push(1, 3, 0, &[0.0; 3]), 0.0),
            Err(KvError::Protocol(_))
        ));
    }

    #[test]
    fn factor_push_to_whole_layer() {
        let p = Partition::build(&[LayerRange { start: 0, len: 4 }], &[ChunkPolicy::Whole], 1, 1);
        let mut s = ServerRole::new(Shard::new(0, &p, 1, &[0.0; 4]), &p, 0.5);
        let b = SfBatch::new(
            0,
            0,
            0,
            2,
            2,
            vec![SufficientFactor {
                u: vec![1.0, 2.0],
                v: vec![3.0, 4.0],
                sample_id: 0,
            }],
        )
        .unwrap();
        let out = s.on_frame(&b.to_frame(), 0.0).unwrap();
        assert_eq!(bytes_to_f32s(&out[0].frame.payload).unwrap(), vec![1.5, 2.0, 3.0, 4.0]);
    }
}
