//! Single-process reference runs.
//!
//! [`train_oracle`] reads the same per-worker batch streams a distributed
//! run reads, concatenates them into one global batch and takes the summed
//! gradient step. With [`OracleUpdate::OneBit`] every worker's delta goes
//! through its own 1-bit quantizer first and the dequantized deltas are
//! summed in worker order.

use super::data::{worker_streams, Dataset};
use super::{backward, forward, gradients, sgd_step, update_scale, EngineError, Network};
use crate::baselines::{fixed_vec, quantize_1bit, QuantState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleUpdate {
    Exact,
    OneBit,
}

#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub workers: usize,
    pub batch: usize,
    pub lr: f32,
    /// Seeds weight init and the batch streams.
    pub seed: u64,
    pub iterations: usize,
    pub update: OracleUpdate,
    /// Keep a copy of the parameters after every iteration.
    pub record_history: bool,
}

#[derive(Debug, Clone, Default)]
pub struct OracleRun {
    /// Mean loss over the global batch, per iteration, before the step.
    pub losses: Vec<f32>,
    /// Parameters after each iteration when requested.
    pub history: Vec<Vec<Vec<f32>>>,
    pub params: Vec<Vec<f32>>,
    /// Elements where the 1-bit residual identity failed, summed over
    /// iterations. Always zero for exact runs.
    pub telescoping_violations: usize,
}

/// Number of iterations that make up `epochs` passes over the smallest
/// worker partition.
pub fn iterations_for_epochs(
    data: &Dataset,
    workers: usize,
    batch: usize,
    epochs: usize,
) -> Result<usize, EngineError> {
    let streams = worker_streams(data, workers, batch, 0)?;
    Ok(epochs * streams.iter().map(|s| s.batches_per_epoch()).min().unwrap_or(0))
}

pub fn train_oracle(net: &Network, data: &Dataset, cfg: &OracleConfig) -> Result<OracleRun, EngineError> {
    let mut streams = worker_streams(data, cfg.workers, cfg.batch, cfg.seed)?;
    let mut params: Vec<Vec<f32>> = net.init_weights(cfg.seed);
    let scale = update_scale(cfg.lr, cfg.batch, cfg.workers);
    let mut run = OracleRun::default();
    let mut quant: Vec<Vec<QuantState>> = (0..cfg.workers)
        .map(|_| net.dims.iter().map(|&(m, n)| QuantState::new(m, n)).collect())
        .collect();
    let mut sum_g: Vec<Vec<Vec<i64>>> = (0..cfg.workers)
        .map(|_| net.dims.iter().map(|&(m, n)| vec![0; m * n]).collect())
        .collect();
    let mut sum_q = sum_g.clone();

    for _ in 0..cfg.iterations {
        let batches: Vec<(Vec<f32>, Vec<usize>)> = streams.iter_mut().map(|s| s.next_batch(data)).collect();
        match cfg.update {
            OracleUpdate::Exact => {
                let x: Vec<f32> = batches.iter().flat_map(|b| b.0.iter().copied()).collect();
                let y: Vec<usize> = batches.iter().flat_map(|b| b.1.iter().copied()).collect();
                let fwd = forward(net, &params, &x, &y)?;
                run.losses.push(fwd.loss);
                let grads = gradients(net, &params, &fwd);
                for (p, g) in params.iter_mut().zip(&grads) {
                    sgd_step(p, g, scale);
                }
            }
            OracleUpdate::OneBit => {
                let mut deltas: Vec<Vec<Vec<f32>>> = Vec::with_capacity(cfg.workers);
                let mut loss = 0.0f32;
                for (w, (x, y)) in batches.iter().enumerate() {
                    let fwd = forward(net, &params, x, y)?;
                    loss += fwd.loss;
                    let mut per_layer = vec![Vec::new(); net.num_layers()];
                    let mut err = None;
                    backward(net, &params, &fwd, |g| {
                        let delta: Vec<f32> = g.grad.iter().map(|&v| scale * v).collect();
                        let state = &mut quant[w][g.layer];
                        match quantize_1bit(&delta, state) {
                            Ok(code) => {
                                let q = code.dequantize();
                                accumulate(&mut sum_g[w][g.layer], &fixed_vec(&delta));
                                accumulate(&mut sum_q[w][g.layer], &fixed_vec(&q));
                                run.telescoping_violations += sum_g[w][g.layer]
                                    .iter()
                                    .zip(&sum_q[w][g.layer])
                                    .zip(state.residual_fixed())
                                    .filter(|((a, b), r)| **a != **b + **r)
                                    .count();
                                per_layer[g.layer] = q;
                            }
                            Err(e) => err = Some(e),
                        }
                    });
                    if let Some(e) = err {
                        return Err(EngineError::Shape(e.to_string()));
                    }
                    deltas.push(per_layer);
                }
                run.losses.push(loss / cfg.workers as f32);
                for d in &deltas {
                    for (p, q) in params.iter_mut().zip(d) {
                        sgd_step(p, q, 1.0);
                    }
                }
            }
        }
        if cfg.record_history {
            run.history.push(params.clone());
        }
    }
    run.params = params;
    Ok(run)
}

fn accumulate(acc: &mut [i64], x: &[i64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Fraction of the dataset classified correctly.
pub fn accuracy(net: &Network, params: &[Vec<f32>], data: &Dataset) -> Result<f64, EngineError> {
    let fwd = forward(net, params, &data.x, &data.labels)?;
    let hits = fwd
        .predictions()
        .iter()
        .zip(&data.labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / data.len() as f64)
}
