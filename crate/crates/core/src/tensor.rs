//! Dense f64 matrix kernels used by both the inference forward pass and
//! the training tape. Keeping a single set of kernels makes the two paths
//! bit-identical for the same input.

use rayon::prelude::*;

/// Work threshold above which matmul kernels split rows across the rayon
/// pool. Each output element is still produced by exactly one task, so
/// results do not depend on the thread count.
const PAR_FLOP_THRESHOLD: usize = 1 << 17;

/// `out += a @ b` with `a: [m,k]`, `b: [k,n]`, `out: [m,n]`.
pub fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row_job = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row_job(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row_job(i, orow);
        }
    }
}

/// `out += a @ b^T` with `a: [m,k]`, `b: [n,k]`, `out: [m,n]`.
pub fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row_job = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row_job(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row_job(i, orow);
        }
    }
}

/// `out += a^T @ b` with `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
pub fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    // Parallelize over output rows (columns of a); each task scans all of b.
    let row_job = |kk: usize, orow: &mut [f64]| {
        for i in 0..m {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(kk, orow)| row_job(kk, orow));
    } else {
        for (kk, orow) in out.chunks_mut(n).enumerate() {
            row_job(kk, orow);
        }
    }
}

/// Row-wise softmax in place over a `[rows, n]` matrix.
pub fn softmax_rows_inplace(x: &mut [f64], n: usize) {
    for row in x.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
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
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm: `out = (x - mean) / sqrt(var + eps) * gain + bias`.
pub fn layernorm_rows(out: &mut [f64], x: &[f64], gain: &[f64], bias: &[f64], n: usize) {
    debug_assert_eq!(out.len(), x.len());
    for (orow, xrow) in out.chunks_mut(n).zip(x.chunks(n)) {
        let mean = xrow.iter().sum::<f64>() / n as f64;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..n {
            orow[j] = (xrow[j] - mean) * rstd * gain[j] + bias[j];
        }
    }
}

/// tanh-form GELU; smooth, so finite-difference gradient checks stay clean.
pub fn gelu(v: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh())
}

pub fn gelu_grad(v: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (v + 0.044_715 * v * v * v);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044_715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known_values() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_acc(&mut out, &a, &b, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // [4,3]
        let mut nt = vec![0.0; 8];
        matmul_nt_acc(&mut nt, &a, &b, 2, 3, 4);
        // Reference: transpose b into [3,4] then plain matmul.
        let mut bt = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                bt[j * 4 + i] = b[i * 3 + j];
            }
        }
        let mut reference = vec![0.0; 8];
        matmul_acc(&mut reference, &a, &bt, 2, 3, 4);
        for (x, y) in nt.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| (v as f64 * 0.7).cos()).collect(); // [3,2]
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.1).collect(); // [3,4]
        let mut tn = vec![0.0; 8];
        matmul_tn_acc(&mut tn, &a, &b, 3, 2, 4);
        let mut at = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                at[j * 3 + i] = a[i * 2 + j];
            }
        }
        let mut reference = vec![0.0; 8];
        matmul_acc(&mut reference, &at, &b, 2, 3, 4);
        for (x, y) in tn.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0];
        softmax_rows_inplace(&mut x, 3);
        for row in x.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn layernorm_zero_mean_unit_var() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let gain = vec![1.0; 4];
        let bias = vec![0.0; 4];
        let mut out = vec![0.0; 4];
        layernorm_rows(&mut out, &x, &gain, &bias, 4);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &v in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(v + h) - gelu(v - h)) / (2.0 * h);
            assert!((fd - gelu_grad(v)).abs() < 1e-8, "at {v}");
        }
    }
}
