//! Dense kernels shared by the engine.
//!
//! Every kernel parallelizes over independent output rows only; reductions
//! inside a row stay sequential, so the `parallel` and sequential builds (and
//! the `*_seq`/`*_par` variants below) produce bit-identical outputs.

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row-parallel apply: splits `buf` into rows of `width` and calls
/// `f(row_index, row)` for each.
pub fn for_each_row<T, F>(buf: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(width > 0 && buf.len() % width == 0);
    #[cfg(feature = "parallel")]
    buf.par_chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
    #[cfg(not(feature = "parallel"))]
    buf.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Like [`for_each_row`] but hands out matching rows of two buffers, e.g. an
/// attention-probability row and the output row it produces.
pub fn for_each_row_pair<T, U, F>(a: &mut [T], wa: usize, b: &mut [U], wb: usize, f: F)
where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T], &mut [U]) + Sync,
{
    debug_assert!(a.len() / wa == b.len() / wb);
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(wa)
        .zip(b.par_chunks_mut(wb))
        .enumerate()
        .for_each(|(i, (ra, rb))| f(i, ra, rb));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(wa)
        .zip(b.chunks_mut(wb))
        .enumerate()
        .for_each(|(i, (ra, rb))| f(i, ra, rb));
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::ZERO;
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn matmul_row<F: Scalar>(x_row: &[F], w: &[F], out_row: &mut [F], in_dim: usize) {
    for (o, out) in out_row.iter_mut().enumerate() {
        *out = dot(x_row, &w[o * in_dim..(o + 1) * in_dim]);
    }
}

/// `out[n × out_dim] = x[n × in_dim] · Wᵀ` with `w` stored row-major
/// `[out_dim × in_dim]`. Sequential reference.
pub fn matmul_seq<F: Scalar>(x: &[F], n: usize, in_dim: usize, w: &[F], out_dim: usize) -> Vec<F> {
    debug_assert_eq!(x.len(), n * in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut out = vec![F::ZERO; n * out_dim];
    for (i, out_row) in out.chunks_mut(out_dim).enumerate() {
        matmul_row(&x[i * in_dim..(i + 1) * in_dim], w, out_row, in_dim);
    }
    out
}

/// Row-parallel variant of [`matmul_seq`]; identical results.
#[cfg(feature = "parallel")]
pub fn matmul_par<F: Scalar>(x: &[F], n: usize, in_dim: usize, w: &[F], out_dim: usize) -> Vec<F> {
    debug_assert_eq!(x.len(), n * in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut out = vec![F::ZERO; n * out_dim];
    out.par_chunks_mut(out_dim).enumerate().for_each(|(i, out_row)| {
        matmul_row(&x[i * in_dim..(i + 1) * in_dim], w, out_row, in_dim);
    });
    out
}

pub fn matmul<F: Scalar>(x: &[F], n: usize, in_dim: usize, w: &[F], out_dim: usize) -> Vec<F> {
    #[cfg(feature = "parallel")]
    return matmul_par(x, n, in_dim, w, out_dim);
    #[cfg(not(feature = "parallel"))]
    return matmul_seq(x, n, in_dim, w, out_dim);
}

/// Max-subtracted softmax over `row`, in place.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    if row.is_empty() {
        return;
    }
    let mut max = row[0];
    for v in row.iter() {
        max = max.maximum(*v);
    }
    let mut sum = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// RMS normalization with a learned gain: `out[i] = gain[i] · x[i] / rms(x)`.
pub fn rms_norm<F: Scalar>(x: &[F], gain: &[F], out: &mut [F]) {
    let n = x.len();
    debug_assert_eq!(gain.len(), n);
    debug_assert_eq!(out.len(), n);
    let mut ms = F::ZERO;
    for v in x {
        ms += *v * *v;
    }
    ms = ms / F::from_f64(n as f64) + F::from_f64(1e-8);
    let inv = F::ONE / ms.sqrt();
    for i in 0..n {
        out[i] = gain[i] * x[i] * inv;
    }
}

/// Tanh-approximation GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let half = F::from_f64(0.5);
    let k = F::from_f64(0.044_715);
    half * x * (F::ONE + (c * (x + k * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_computation() {
        // x = [[1,2],[3,4]], w rows = [[1,0],[0,1],[1,1]]
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let w = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let out = matmul_seq(&x, 2, 2, &w, 3);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn par_and_seq_matmul_are_bit_identical() {
        let mut rng = crate::rng::seeded(11);
        use rand::Rng;
        let x: Vec<f32> = (0..64 * 24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..24 * 40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = matmul_seq(&x, 64, 24, &w, 40);
        let b = matmul_par(&x, 64, 24, &w, 40);
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![0.3f64, -2.0, 5.0, 0.0];
        softmax_in_place(&mut row);
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|p| *p > 0.0));
    }
}
