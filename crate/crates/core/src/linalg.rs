//! Small dense helpers over row-major matrices.
//!
//! Every path that turns per-sample factors into a weight gradient goes
//! through [`outer_accumulate`], so the trainer, the peer reconstruction and
//! the server-side reconstruction produce bitwise-identical sums.

use num_traits::Float;

/// `out[i * n + j] += u[i] * v[j]` for an `m x n` row-major `out`.
pub fn outer_accumulate<T: Float>(out: &mut [T], u: &[T], v: &[T]) {
    let n = v.len();
    debug_assert_eq!(out.len(), u.len() * n);
    for (row, &ui) in out.chunks_exact_mut(n).zip(u) {
        if ui == T::zero() {
            continue;
        }
        for (o, &vj) in row.iter_mut().zip(v) {
            *o = *o + ui * vj;
        }
    }
}

/// `y = W x` for `W` of shape `m x n`.
pub fn matvec<T: Float>(w: &[T], x: &[T], y: &mut [T]) {
    let n = x.len();
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(n)) {
        *yi = row.iter().zip(x).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    }
}

/// `y = W^T d` for `W` of shape `m x n`; `y` has length `n`.
pub fn matvec_t<T: Float>(w: &[T], d: &[T], y: &mut [T]) {
    let n = y.len();
    y.iter_mut().for_each(|v| *v = T::zero());
    for (row, &di) in w.chunks_exact(n).zip(d) {
        if di == T::zero() {
            continue;
        }
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj = *yj + wij * di;
        }
    }
}

/// `max |a - b| / max |b|`, or `max |a - b|` when `b` is all zeros.
pub fn rel_error<T: Float>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_error length mismatch");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let x = x.to_f64().unwrap();
        let y = y.to_f64().unwrap();
        diff = diff.max((x - y).abs());
        scale = scale.max(y.abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outer_of_two_vectors() {
        let mut out = vec![0.0f32; 4];
        outer_accumulate(&mut out, &[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(out, vec![3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn matvec_and_transpose() {
        let w = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut y = [0.0; 2];
        matvec(&w, &[1.0, 0.0, -1.0], &mut y);
        assert_eq!(y, [-2.0, -2.0]);
        let mut z = [0.0; 3];
        matvec_t(&w, &[1.0, 1.0], &mut z);
        assert_eq!(z, [5.0, 7.0, 9.0]);
    }

    #[test]
    fn rel_error_uses_reference_scale() {
        assert_eq!(rel_error(&[1.0f32, 2.0], &[1.0, 2.0]), 0.0);
        assert!((rel_error(&[1.0f64, 2.1], &[1.0, 2.0]) - 0.05).abs() < 1e-12);
        assert_eq!(rel_error(&[0.5f64], &[0.0]), 0.5);
    }
}
