//! Synthetic Gaussian-mixture data and per-worker batch streams.

use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EngineError;

/// Class-mean distance in units of the per-coordinate standard deviation.
pub const DEFAULT_SEPARATION: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    /// `n x dim` row-major.
    pub x: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Contiguous, disjoint, covering slices, one per worker.
    pub fn partition(&self, workers: usize) -> Vec<Range<usize>> {
        let n = self.len();
        (0..workers).map(|p| p * n / workers..(p + 1) * n / workers).collect()
    }
}

/// `synthetic:<n>:<dim>:<classes>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
}

impl FromStr for DataSpec {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EngineError::Shape(format!("dataset '{s}' is not synthetic:<n>:<dim>:<classes>"));
        let mut parts = s.split(':');
        if parts.next() != Some("synthetic") {
            return Err(bad());
        }
        let mut num = || parts.next().and_then(|p| p.parse::<usize>().ok()).ok_or_else(bad);
        let spec = DataSpec {
            n: num()?,
            dim: num()?,
            classes: num()?,
        };
        if parts.next().is_some() || spec.dim == 0 || spec.classes < 2 || spec.n < spec.classes {
            return Err(bad());
        }
        Ok(spec)
    }
}

impl std::fmt::Display for DataSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "synthetic:{}:{}:{}", self.n, self.dim, self.classes)
    }
}

pub fn make_synthetic_dataset(seed: u64, n: usize, dim: usize, classes: usize) -> Dataset {
    make_synthetic_dataset_with(seed, n, dim, classes, DEFAULT_SEPARATION)
}

/// Labels cycle through the classes; sample `i` is drawn from
/// `N(mu_{label}, I)`. With `dim >= classes` the means are scaled basis
/// vectors, `separation / sqrt(2)` long, so any two are `separation` apart.
/// Otherwise they are seeded random directions of the same length.
pub fn make_synthetic_dataset_with(seed: u64, n: usize, dim: usize, classes: usize, separation: f64) -> Dataset {
    assert!(classes >= 1 && dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if dim >= classes {
                let mut m = vec![0.0; dim];
                m[c] = radius;
                m
            } else {
                let d: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                d.into_iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();
    let mut x = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for mu in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.push((mu + z) as f32);
        }
    }
    Dataset {
        dim,
        classes,
        x,
        labels,
    }
}

/// Endless batches of `k` samples from one worker's slice, reshuffled at the
/// start of every epoch with an RNG seeded once by `seed`.
#[derive(Debug, Clone)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    k: usize,
    rng: ChaCha8Rng,
    pub epoch: usize,
}

impl BatchStream {
    pub fn new(range: Range<usize>, k: usize, seed: u64) -> Result<Self, EngineError> {
        if range.len() < k || k == 0 {
            return Err(EngineError::Shape(format!(
                "partition of {} samples cannot fill a batch of {k}",
                range.len()
            )));
        }
        let mut s = BatchStream {
            order: range.collect(),
            pos: 0,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    /// Batches per epoch; a trailing partial batch is skipped.
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.k
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.k > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let out = self.order[self.pos..self.pos + self.k].to_vec();
        self.pos += self.k;
        out
    }

    pub fn next_batch(&mut self, data: &Dataset) -> (Vec<f32>, Vec<usize>) {
        let idx = self.next_indices();
        let mut x = Vec::with_capacity(idx.len() * data.dim);
        for &i in &idx {
            x.extend_from_slice(data.sample(i));
        }
        (x, idx.iter().map(|&i| data.labels[i]).collect())
    }
}

/// One stream per worker: worker `p` reads partition `p` with seed
/// `seed + p`.
pub fn worker_streams(data: &Dataset, workers: usize, k: usize, seed: u64) -> Result<Vec<BatchStream>, EngineError> {
    data.partition(workers)
        .into_iter()
        .enumerate()
        .map(|(p, r)| BatchStream::new(r, k, seed.wrapping_add(p as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = make_synthetic_dataset(3, 101, 4, 3);
        assert_eq!(a, make_synthetic_dataset(3, 101, 4, 3));
        assert_ne!(a, make_synthetic_dataset(4, 101, 4, 3));
        let mut counts = [0usize; 3];
        a.labels.iter().for_each(|&y| counts[y] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn partitions_are_disjoint_and_cover() {
        let d = make_synthetic_dataset(0, 10, 2, 2);
        let p = d.partition(3);
        assert_eq!(p, vec![0..3, 3..6, 6..10]);
    }

    #[test]
    fn streams_cover_an_epoch_then_reshuffle() {
        let mut s = BatchStream::new(10..20, 5, 9).unwrap();
        let mut seen: Vec<usize> = s.next_indices();
        seen.extend(s.next_indices());
        seen.sort();
        assert_eq!(seen, (10..20).collect::<Vec<_>>());
        assert_eq!(s.epoch, 0);
        s.next_indices();
        assert_eq!(s.epoch, 1);
        assert!(BatchStream::new(0..3, 4, 0).is_err());
    }

    #[test]
    fn data_spec_parses() {
        let d: DataSpec = "synthetic:100:8:3".parse().unwrap();
        assert_eq!(
            d,
            DataSpec {
                n: 100,
                dim: 8,
                classes: 3
            }
        );
        assert_eq!(d.to_string(), "synthetic:100:8:3");
        assert!("mnist:1:2:3".parse::<DataSpec>().is_err());
        assert!("synthetic:1:2".parse::<DataSpec>().is_err());
        assert!("synthetic:1:2:3".parse::<DataSpec>().is_err());
    }
}
