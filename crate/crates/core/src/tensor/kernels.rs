//! Dense row-major kernels on raw slices.
//!
//! These are shared by the taped operations and by the tape-free incremental
//! decoder, so both paths perform identical arithmetic.

use crate::exec::ExecMode;

/// Below this many multiply-adds a parallel split costs more than it saves.
#[cfg(feature = "parallel")]
const PAR_WORK_THRESHOLD: usize = 1 << 15;

#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], out_row: &mut [f64], n: usize) {
    out_row.fill(0.0);
    for (p, &av) in a_row.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// `out[m,n] = a[m,k] · b[k,n]`, single thread.
pub fn matmul_seq(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    for (a_row, out_row) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n)) {
        if k == 0 {
            out_row.fill(0.0);
        } else {
            matmul_row(a_row, b, out_row, n);
        }
    }
}

/// `out[m,n] = a[m,k] · b[k,n]`, rows split over the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    use rayon::prelude::*;
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || k == 0 {
        out.fill(0.0);
        return;
    }
    out.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(out_row, a_row)| matmul_row(a_row, b, out_row, n));
}

/// `out[m,n] = a[m,k] · b[k,n]`.
pub fn matmul(mode: ExecMode, a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if mode.effective() == ExecMode::Parallel && m * k * n >= PAR_WORK_THRESHOLD {
        return matmul_par(a, b, out, m, k, n);
    }
    #[cfg(not(feature = "parallel"))]
    let _ = mode;
    matmul_seq(a, b, out, m, k, n)
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn matmul_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(a_row, b_row);
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · c[m,n]`.
pub fn matmul_at_acc(a: &[f64], c: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (ov, &cv) in o.iter_mut().zip(c_row) {
                *ov += av * cv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// In-place softmax of one row, max-subtracted.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-softmax of one row into `out`.
pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Layer-normalizes `x` into `out`; returns `(mean, 1/sqrt(var + eps))`.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
