//! Sufficient factors and their broadcast between workers.
//!
//! For a fully-connected layer the per-sample weight gradient is the outer
//! product `u v^T` of the gradient at the layer output (`u`, length M) and
//! the layer input (`v`, length N). A worker ships its K pairs instead of the
//! M x N matrix and every receiver rebuilds the sum locally.
//!
//! Payload layout: `K u32, M u32, N u32`, then K records of `M f32 || N f32`,
//! all little-endian.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::linalg::outer_accumulate;
use crate::planner::Scheme;
use crate::transport::{Frame, MsgType};

#[derive(Debug, Error, PartialEq)]
pub enum SfbError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("malformed factor payload: {0}")]
    Payload(String),
    #[error("duplicate factors from worker {origin} for layer {layer} iteration {iteration}")]
    Duplicate { origin: u32, layer: u32, iteration: u64 },
    #[error("factors for iteration {got} arrived while layer {layer} is at iteration {expected}")]
    Stale { layer: u32, expected: u64, got: u64 },
    #[error("layer {0} is not synchronized by factor broadcast")]
    NotSfbLayer(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientFactor {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub sample_id: u32,
}

/// All factors one worker produced for one layer in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SfBatch {
    pub layer: u32,
    pub iteration: u64,
    pub origin: u32,
    pub rows: usize,
    pub cols: usize,
    pub factors: Vec<SufficientFactor>,
}

const PAYLOAD_HEADER: usize = 12;

impl SfBatch {
    pub fn new(
        layer: u32,
        iteration: u64,
        origin: u32,
        rows: usize,
        cols: usize,
        factors: Vec<SufficientFactor>,
    ) -> Result<Self, SfbError> {
        let b = SfBatch {
            layer,
            iteration,
            origin,
            rows,
            cols,
            factors,
        };
        b.check()?;
        Ok(b)
    }

    fn check(&self) -> Result<(), SfbError> {
        for f in &self.factors {
            if f.u.len() != self.rows || f.v.len() != self.cols {
                return Err(SfbError::Dimension(format!(
                    "factor {} is {}x{}, layer is {}x{}",
                    f.sample_id,
                    f.u.len(),
                    f.v.len(),
                    self.rows,
                    self.cols
                )));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.factors.len()
    }

    /// Parameter elements carried: `K (M + N)`.
    pub fn elements(&self) -> usize {
        self.k() * (self.rows + self.cols)
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PAYLOAD_HEADER + 4 * self.elements());
        for x in [self.k(), self.rows, self.cols] {
            out.extend_from_slice(&(x as u32).to_le_bytes());
        }
        for f in &self.factors {
            for x in f.u.iter().chain(&f.v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode_payload(layer: u32, iteration: u64, origin: u32, bytes: &[u8]) -> Result<Self, SfbError> {
        if bytes.len() < PAYLOAD_HEADER {
            return Err(SfbError::Payload(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (k, m, n) = (word(0), word(1), word(2));
        let expect = PAYLOAD_HEADER as u128 + 4 * k as u128 * (m as u128 + n as u128);
        if bytes.len() as u128 != expect {
            return Err(SfbError::Payload(format!(
                "K={k} M={m} N={n} needs {expect} bytes, got {}",
                bytes.len()
            )));
        }
        let mut floats = bytes[PAYLOAD_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let factors = (0..k)
            .map(|s| SufficientFactor {
                u: floats.by_ref().take(m).collect(),
                v: floats.by_ref().take(n).collect(),
                sample_id: s as u32,
            })
            .collect();
        Ok(SfBatch {
            layer,
            iteration,
            origin,
            rows: m,
            cols: n,
            factors,
        })
    }

    pub fn to_frame(&self) -> Frame {
        Frame {
            msg_type: MsgType::SfBatch,
            layer: self.layer,
            chunk_id: 0,
            iteration: self.iteration,
            origin: self.origin,
            payload: self.encode_payload(),
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<Self, SfbError> {
        if frame.msg_type != MsgType::SfBatch {
            return Err(SfbError::Payload(format!(
                "{:?} frame is not a factor batch",
                frame.msg_type
            )));
        }
        Self::decode_payload(frame.layer, frame.iteration, frame.origin, &frame.payload)
    }

    /// Multiplies every `u` by `a`.
    pub fn scale_u(&mut self, a: f32) {
        for f in &mut self.factors {
            f.u.iter_mut().for_each(|x| *x *= a);
        }
    }
}

/// `sum_k u_k v_k^T` as a row-major M x N matrix.
pub fn reconstruct(batch: &SfBatch) -> Result<Vec<f32>, SfbError> {
    batch.check()?;
    let mut g = vec![0.0f32; batch.rows * batch.cols];
    for f in &batch.factors {
        outer_accumulate(&mut g, &f.u, &f.v);
    }
    Ok(g)
}

/// One outgoing copy of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SendRecord {
    pub peer: usize,
    pub frame: Frame,
}

/// Serializes `batch` once and addresses a copy to every worker except its
/// origin.
pub fn broadcast(batch: &SfBatch, num_workers: usize, scheme: Scheme) -> Result<Vec<SendRecord>, SfbError> {
    if scheme != Scheme::Sfb {
        return Err(SfbError::NotSfbLayer(batch.layer));
    }
    let frame = batch.to_frame();
    Ok((0..num_workers)
        .filter(|&p| p != batch.origin as usize)
        .map(|peer| SendRecord {
            peer,
            frame: frame.clone(),
        })
        .collect())
}

/// `params += scale * reconstruct(batch)`.
pub fn apply_remote(batch: &SfBatch, params: &mut [f32], scale: f32) -> Result<(), SfbError> {
    if params.len() != batch.rows * batch.cols {
        return Err(SfbError::Dimension(format!(
            "parameter block has {} elements, batch is {}x{}",
            params.len(),
            batch.rows,
            batch.cols
        )));
    }
    let g = reconstruct(batch)?;
    for (p, x) in params.iter_mut().zip(&g) {
        *p += scale * *x;
    }
    Ok(())
}

/// Collects one layer's batches for one iteration and applies them in
/// ascending origin order, so every replica performs the same float
/// operations.
#[derive(Debug, Clone)]
pub struct SfbCollector {
    pub layer: u32,
    pub rows: usize,
    pub cols: usize,
    pub num_workers: usize,
    pub iteration: u64,
    received: BTreeMap<u32, SfBatch>,
    /// Batches that arrived early for later iterations.
    early: BTreeMap<(u64, u32), SfBatch>,
}

impl SfbCollector {
    pub fn new(layer: u32, rows: usize, cols: usize, num_workers: usize) -> Self {
        SfbCollector {
            layer,
            rows,
            cols,
            num_workers,
            iteration: 0,
            received: BTreeMap::new(),
            early: BTreeMap::new(),
        }
    }

    /// Accepts a batch for the current or a later iteration.
    pub fn insert(&mut self, batch: SfBatch) -> Result<(), SfbError> {
        if batch.layer != self.layer || batch.rows != self.rows || batch.cols != self.cols {
            return Err(SfbError::Dimension(format!(
                "batch for layer {} ({}x{}) offered to layer {} ({}x{})",
                batch.layer, batch.rows, batch.cols, self.layer, self.rows, self.cols
            )));
        }
        batch.check()?;
        if batch.origin as usize >= self.num_workers {
            return Err(SfbError::Payload(format!("unknown origin {}", batch.origin)));
        }
        let dup = SfbError::Duplicate {
            origin: batch.origin,
            layer: batch.layer,
            iteration: batch.iteration,
        };
        if batch.iteration < self.iteration {
            return Err(SfbError::Stale {
                layer: self.layer,
                expected: self.iteration,
                got: batch.iteration,
            });
        }
        if batch.iteration > self.iteration {
            let key = (batch.iteration, batch.origin);
            if self.early.contains_key(&key) {
                return Err(dup);
            }
            self.early.insert(key, batch);
            return Ok(());
        }
        if self.received.contains_key(&batch.origin) {
            return Err(dup);
        }
        self.received.insert(batch.origin, batch);
        Ok(())
    }

    pub fn has(&self, origin: u32) -> bool {
        self.received.contains_key(&origin)
    }

    pub fn is_complete(&self) -> bool {
        self.received.len() == self.num_workers
    }

    pub fn missing(&self) -> Vec<u32> {
        (0..self.num_workers as u32)
            .filter(|o| !self.received.contains_key(o))
            .collect()
    }

    /// Applies every batch of the current iteration in origin order and
    /// moves on to the next iteration.
    pub fn apply_all(&mut self, params: &mut [f32], scale: f32) -> Result<(), SfbError> {
        if !self.is_complete() {
            return Err(SfbError::Payload(format!("missing factors from {:?}", self.missing())));
        }
        for b in self.received.values() {
            apply_remote(b, params, scale)?;
        }
        self.received.clear();
        self.iteration += 1;
        let next = self.iteration;
        let keys: Vec<_> = self.early.range((next, 0)..(next + 1, 0)).map(|(k, _)| *k).collect();
        for k in keys {
            let b = self.early.remove(&k).unwrap();
            self.received.insert(b.origin, b);
        }
        Ok(())
    }
}
