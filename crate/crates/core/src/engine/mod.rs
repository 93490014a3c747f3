//! Reference trainer: a stack of dense layers, ReLU between them and a
//! softmax cross-entropy output, trained by synchronous SGD.
//!
//! Gradients are kept in the "descent" orientation: for every layer the
//! backward pass yields `G = sum_k u_k v_k^T` with `u_k` the negated
//! per-sample loss gradient at the layer output and `v_k` the layer input.
//! A step is `theta += scale * G` with `scale = lr / (K * P1)`, which is a
//! mean-gradient step on the global batch.

pub mod data;
pub mod oracle;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{matvec, matvec_t, outer_accumulate};
use crate::modelspec::{ModelError, ModelSpec};
use crate::sfb::{SfBatch, SufficientFactor};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Layer shapes `(rows, cols)` = `(outputs, inputs)`, bottom layer first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    pub dims: Vec<(usize, usize)>,
}

impl Network {
    pub fn new(dims: Vec<(usize, usize)>) -> Result<Self, EngineError> {
        if dims.is_empty() {
            return Err(EngineError::Shape("network has no layers".into()));
        }
        for w in dims.windows(2) {
            if w[1].1 != w[0].0 {
                return Err(EngineError::Shape(format!(
                    "layer with {} outputs feeds a layer with {} inputs",
                    w[0].0, w[1].1
                )));
            }
        }
        if dims.iter().any(|&(m, n)| m == 0 || n == 0) {
            return Err(EngineError::Shape("zero-sized layer".into()));
        }
        Ok(Network { dims })
    }

    /// Executable network for a model whose layers all carry a shape.
    pub fn from_model(model: &ModelSpec) -> Result<Self, EngineError> {
        model.check_dense_chain()?;
        Network::new(model.layers.iter().map(|l| (l.rows(), l.cols())).collect())
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0].1
    }

    pub fn classes(&self) -> usize {
        self.dims.last().unwrap().0
    }

    /// Seeded uniform(-1/sqrt(N), 1/sqrt(N)) weights per layer.
    pub fn init_weights<T: Float>(&self, seed: u64) -> Vec<Vec<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.dims
            .iter()
            .map(|&(m, n)| {
                let b = 1.0 / (n as f64).sqrt();
                (0..m * n).map(|_| T::from(rng.random_range(-b..b)).unwrap()).collect()
            })
            .collect()
    }
}

/// Read access to per-layer weight matrices.
pub trait WeightSource<T> {
    fn with_layer<R>(&self, layer: usize, f: impl FnOnce(&[T]) -> R) -> R;
}

impl<T> WeightSource<T> for [Vec<T>] {
    fn with_layer<R>(&self, layer: usize, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self[layer])
    }
}

impl<T> WeightSource<T> for Vec<Vec<T>> {
    fn with_layer<R>(&self, layer: usize, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self[layer])
    }
}

/// Activations of one forward pass; `acts[0]` is the input batch and
/// `acts[L]` the softmax output, each `K x width` row-major.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub batch: usize,
    pub acts: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    /// Mean cross-entropy over the batch.
    pub loss: T,
}

impl<T: Float> ForwardPass<T> {
    pub fn probs(&self) -> &[T] {
        self.acts.last().unwrap()
    }

    pub fn predictions(&self) -> Vec<usize> {
        let c = self.probs().len() / self.batch;
        self.probs()
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Gradient of one layer plus the factors it was built from.
#[derive(Debug, Clone)]
pub struct LayerGrad<T> {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    /// `K x rows`: negated per-sample loss gradients at the layer output.
    pub u: Vec<T>,
    /// `K x cols`: per-sample layer inputs.
    pub v: Vec<T>,
    /// `rows x cols`: `sum_k u_k v_k^T`.
    pub grad: Vec<T>,
}

impl LayerGrad<f32> {
    pub fn batch(&self) -> usize {
        self.u.len() / self.rows
    }

    pub fn to_sf_batch(&self, iteration: u64, origin: u32) -> SfBatch {
        let factors = self
            .u
            .chunks_exact(self.rows)
            .zip(self.v.chunks_exact(self.cols))
            .enumerate()
            .map(|(k, (u, v))| SufficientFactor {
                u: u.to_vec(),
                v: v.to_vec(),
                sample_id: k as u32,
            })
            .collect();
        SfBatch {
            layer: self.layer as u32,
            iteration,
            origin,
            rows: self.rows,
            cols: self.cols,
            factors,
        }
    }
}

fn softmax_xent<T: Float>(logits: &mut [T], label: usize) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let shifted_label = logits[label] - max;
    let mut sum = T::zero();
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in logits.iter_mut() {
        *x = *x / sum;
    }
    sum.ln() - shifted_label
}

/// Forward pass over `K = labels.len()` samples stored row-major in `x`.
pub fn forward<T: Float, W: WeightSource<T> + ?Sized>(
    net: &Network,
    weights: &W,
    x: &[T],
    labels: &[usize],
) -> Result<ForwardPass<T>, EngineError> {
    let k = labels.len();
    if k == 0 || x.len() != k * net.input_dim() {
        return Err(EngineError::Shape(format!(
            "batch of {} values for {k} samples of width {}",
            x.len(),
            net.input_dim()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= net.classes()) {
        return Err(EngineError::Shape(format!(
            "label {bad} with {} classes",
            net.classes()
        )));
    }
    let mut acts = Vec::with_capacity(net.num_layers() + 1);
    acts.push(x.to_vec());
    let last = net.num_layers() - 1;
    let mut loss = T::zero();
    for (l, &(m, n)) in net.dims.iter().enumerate() {
        let input = &acts[l];
        let mut out = vec![T::zero(); k * m];
        weights.with_layer(l, |w| {
            for (xi, yi) in input.chunks_exact(n).zip(out.chunks_exact_mut(m)) {
                matvec(w, xi, yi);
            }
        });
        if l == last {
            for (row, &y) in out.chunks_exact_mut(m).zip(labels) {
                loss = loss + softmax_xent(row, y);
            }
        } else {
            out.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        acts.push(out);
    }
    Ok(ForwardPass {
        batch: k,
        acts,
        labels: labels.to_vec(),
        loss: loss / T::from(k).unwrap(),
    })
}

/// Backward pass. `on_layer` runs for layers `L-1 .. 0` (top first), right
/// after each layer's step; by then that layer's weights are no longer
/// read.
pub fn backward<T: Float, W: WeightSource<T> + ?Sized>(
    net: &Network,
    weights: &W,
    fwd: &ForwardPass<T>,
    mut on_layer: impl FnMut(LayerGrad<T>),
) {
    let k = fwd.batch;
    let c = net.classes();
    // Negated output gradient: onehot - p.
    let mut u: Vec<T> = fwd.probs().iter().map(|&p| -p).collect();
    for (row, &y) in u.chunks_exact_mut(c).zip(&fwd.labels) {
        row[y] = row[y] + T::one();
    }
    for l in (0..net.num_layers()).rev() {
        let (m, n) = net.dims[l];
        let v = &fwd.acts[l];
        let mut grad = vec![T::zero(); m * n];
        for (uk, vk) in u.chunks_exact(m).zip(v.chunks_exact(n)) {
            outer_accumulate(&mut grad, uk, vk);
        }
        let below = if l > 0 {
            let mut d = vec![T::zero(); k * n];
            weights.with_layer(l, |w| {
                for ((uk, dk), ak) in u.chunks_exact(m).zip(d.chunks_exact_mut(n)).zip(v.chunks_exact(n)) {
                    matvec_t(w, uk, dk);
                    for (di, &ai) in dk.iter_mut().zip(ak) {
                        if ai <= T::zero() {
                            *di = T::zero();
                        }
                    }
                }
            });
            Some(d)
        } else {
            None
        };
        let layer_u = match below {
            Some(d) => std::mem::replace(&mut u, d),
            None => std::mem::take(&mut u),
        };
        on_layer(LayerGrad {
            layer: l,
            rows: m,
            cols: n,
            u: layer_u,
            v: v.clone(),
            grad,
        });
    }
}

/// `theta += scale * grad`.
pub fn sgd_step<T: Float>(params: &mut [T], grad: &[T], scale: T) {
    assert_eq!(params.len(), grad.len(), "sgd_step shape mismatch");
    for (p, &g) in params.iter_mut().zip(grad) {
        *p = *p + scale * g;
    }
}

/// Per-worker step scale `lr / (K * P1)`.
pub fn update_scale(lr: f32, batch: usize, workers: usize) -> f32 {
    lr / (batch * workers) as f32
}

/// Plain gradients for every layer, indexed by layer.
pub fn gradients<T: Float, W: WeightSource<T> + ?Sized>(
    net: &Network,
    weights: &W,
    fwd: &ForwardPass<T>,
) -> Vec<Vec<T>> {
    let mut out = vec![Vec::new(); net.num_layers()];
    backward(net, weights, fwd, |g| out[g.layer] = g.grad);
    out
}
