//! Dense kernels over row-major slices.
//!
//! Work is split across rows only; each output element is reduced in a fixed
//! order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::numeric::Real;

const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn for_each_row<T: Real>(out: &mut [T], cols: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if work >= PAR_THRESHOLD && out.len() > cols {
        out.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `a[m,k] · b[n,k]ᵀ -> [m,n]`
pub(crate) fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_each_row(&mut out, n, m * n * k, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `a[m,k] · b[k,n] -> [m,n]`
pub(crate) fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_each_row(&mut out, n, m * n * k, |i, row| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    });
    out
}

/// `a[r,m]ᵀ · b[r,n] -> [m,n]`
pub(crate) fn matmul_tn<T: Real>(a: &[T], b: &[T], r: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_each_row(&mut out, n, m * n * r, |i, row| {
        for p in 0..r {
            let api = a[p * m + i];
            if api != T::zero() {
                axpy(api, &b[p * n..(p + 1) * n], row);
            }
        }
    });
    out
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn three_layouts_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 4.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let nn = matmul_nn(&a, &b, m, k, n);
        // bᵀ as [n,k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let nt = matmul_nt(&a, &bt, m, k, n);
        // aᵀ as [k,m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let tn = matmul_tn(&at, &b, k, m, n);
        for i in 0..m * n {
            assert!((nn[i] - nt[i]).abs() < 1e-12);
            assert!((nn[i] - tn[i]).abs() < 1e-12);
        }
    }
}
