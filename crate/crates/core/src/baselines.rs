//! 1-bit gradient quantization with error feedback.
//!
//! The other comparison strategies (push factors and pull the whole matrix,
//! and synchronizing all layers after the full backward pass) are routes of
//! the runtime and the timeline; see [`crate::syncer::SyncMode`].
//!
//! Quantization runs in 2^-40 fixed point so the residual bookkeeping is
//! exact: for every element, the sum over iterations of the gradient equals
//! the sum of the dequantized values plus the final residual, bit for bit.
//! Reconstruction scalars are chosen on the f32 grid, so the dequantized
//! values sent as f32 are the same numbers the residual was computed from.

use thiserror::Error;

pub const FIXED_FRAC_BITS: i32 = 40;
const FIXED_LIMIT: f64 = (1u64 << 62) as f64;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("gradient has {got} elements, quantizer expects {expected}")]
    Shape { expected: usize, got: usize },
}

/// `x` on the 2^-40 grid, rounded to nearest and saturated.
pub fn to_fixed(x: f32) -> i64 {
    let v = (x as f64 * (1u64 << FIXED_FRAC_BITS) as f64).round();
    v.clamp(-FIXED_LIMIT, FIXED_LIMIT) as i64
}

pub fn from_fixed(q: i64) -> f32 {
    (q as f64 / (1u64 << FIXED_FRAC_BITS) as f64) as f32
}

/// Rounds a fixed-point value to the nearest value representable both in
/// fixed point and as f32.
fn snap(q: i64) -> i64 {
    to_fixed(from_fixed(q))
}

pub fn fixed_vec(x: &[f32]) -> Vec<i64> {
    x.iter().map(|&v| to_fixed(v)).collect()
}

/// Per-layer error-feedback residual.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    pub rows: usize,
    pub cols: usize,
    residual: Vec<i64>,
}

impl QuantState {
    pub fn new(rows: usize, cols: usize) -> Self {
        QuantState {
            rows,
            cols,
            residual: vec![0; rows * cols],
        }
    }

    pub fn reset(&mut self) {
        self.residual.iter_mut().for_each(|r| *r = 0);
    }

    pub fn residual_fixed(&self) -> &[i64] {
        &self.residual
    }

    pub fn residual(&self) -> Vec<f32> {
        self.residual.iter().map(|&r| from_fixed(r)).collect()
    }
}

/// Sign bits plus per-column reconstruction values.
#[derive(Debug, Clone, PartialEq)]
pub struct OneBitCode {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, bit set for non-negative entries.
    pub bits: Vec<u64>,
    /// Mean of the non-negative entries of each column.
    pub pos: Vec<f32>,
    /// Mean of the negative entries of each column.
    pub neg: Vec<f32>,
}

impl OneBitCode {
    fn bit(&self, i: usize) -> bool {
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn dequantize(&self) -> Vec<f32> {
        (0..self.rows * self.cols)
            .map(|i| {
                if self.bit(i) {
                    self.pos[i % self.cols]
                } else {
                    self.neg[i % self.cols]
                }
            })
            .collect()
    }

    pub fn dequantize_fixed(&self) -> Vec<i64> {
        self.dequantize().into_iter().map(to_fixed).collect()
    }

    /// Encoded size: one bit per element and two f32 per column.
    pub fn wire_bytes(&self) -> usize {
        (self.rows * self.cols).div_ceil(8) + 8 * self.cols
    }
}

/// Quantizes `grad + residual` to one bit per element and stores the
/// quantization error back into the residual.
pub fn quantize_1bit(grad: &[f32], state: &mut QuantState) -> Result<OneBitCode, BaselineError> {
    let (rows, cols) = (state.rows, state.cols);
    if grad.len() != rows * cols {
        return Err(BaselineError::Shape {
            expected: rows * cols,
            got: grad.len(),
        });
    }
    let x: Vec<i64> = grad
        .iter()
        .zip(&state.residual)
        .map(|(&g, &r)| to_fixed(g).saturating_add(r))
        .collect();
    let mut pos_sum = vec![0i128; cols];
    let mut pos_n = vec![0i128; cols];
    let mut neg_sum = vec![0i128; cols];
    let mut neg_n = vec![0i128; cols];
    let mut bits = vec![0u64; (rows * cols).div_ceil(64)];
    for (i, &v) in x.iter().enumerate() {
        let j = i % cols;
        if v >= 0 {
            bits[i / 64] |= 1 << (i % 64);
            pos_sum[j] += v as i128;
            pos_n[j] += 1;
        } else {
            neg_sum[j] += v as i128;
            neg_n[j] += 1;
        }
    }
    let mean = |s: i128, n: i128| if n == 0 { 0 } else { snap((s / n) as i64) };
    let pos_q: Vec<i64> = (0..cols).map(|j| mean(pos_sum[j], pos_n[j])).collect();
    let neg_q: Vec<i64> = (0..cols).map(|j| mean(neg_sum[j], neg_n[j])).collect();
    for (i, (&v, r)) in x.iter().zip(state.residual.iter_mut()).enumerate() {
        let j = i % cols;
        let q = if v >= 0 { pos_q[j] } else { neg_q[j] };
        *r = v - q;
    }
    Ok(OneBitCode {
        rows,
        cols,
        bits,
        pos: pos_q.into_iter().map(from_fixed).collect(),
        neg: neg_q.into_iter().map(from_fixed).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_gradient_is_exact() {
        let mut s = QuantState::new(3, 2);
        let code = quantize_1bit(&[0.37; 6], &mut s).unwrap();
        assert_eq!(code.dequantize(), vec![0.37; 6]);
        assert!(s.residual_fixed().iter().all(|&r| r == 0));
    }

    #[test]
    fn per_column_means() {
        let mut s = QuantState::new(2, 2);
        let code = quantize_1bit(&[1.0, -2.0, 3.0, -4.0], &mut s).unwrap();
        assert_eq!(code.pos, vec![2.0, 0.0]);
        assert_eq!(code.neg, vec![0.0, -3.0]);
        assert_eq!(code.dequantize(), vec![2.0, -3.0, 2.0, -3.0]);
        assert_eq!(s.residual(), vec![-1.0, 1.0, 1.0, -1.0]);
        assert_eq!(code.wire_bytes(), 1 + 16);
    }

    #[test]
    fn shape_is_checked() {
        let mut s = QuantState::new(2, 2);
        assert_eq!(
            quantize_1bit(&[1.0], &mut s),
            Err(BaselineError::Shape { expected: 4, got: 1 })
        );
    }

    #[test]
    fn fixed_roundtrip_of_snapped_values() {
        for q in [1i64, 3, -5, 1 << 20, (1 << 30) + 7, -(1 << 41) - 3] {
            let s = snap(q);
            assert_eq!(to_fixed(from_fixed(s)), s);
        }
    }

    proptest! {
        #[test]
        fn residual_telescopes_exactly(
            grads in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 12), 1..20)
        ) {
            let mut s = QuantState::new(3, 4);
            let mut sum_g = [0i64; 12];
            let mut sum_q = [0i64; 12];
            for g in &grads {
                let code = quantize_1bit(g, &mut s).unwrap();
                for (a, b) in sum_g.iter_mut().zip(fixed_vec(g)) { *a += b; }
                for (a, b) in sum_q.iter_mut().zip(code.dequantize_fixed()) { *a += b; }
                for i in 0..12 {
                    prop_assert_eq!(sum_g[i], sum_q[i] + s.residual_fixed()[i]);
                }
            }
        }

        #[test]
        fn round_trip_error_is_the_residual(g in prop::collection::vec(-3.0f32..3.0, 12)) {
            let mut s = QuantState::new(4, 3);
            let code = quantize_1bit(&g, &mut s).unwrap();
            let q = code.dequantize_fixed();
            for i in 0..12 {
                prop_assert_eq!(to_fixed(g[i]) - q[i], s.residual_fixed()[i]);
            }
        }
    }
}
