//! Dense row-major kernels shared by the forward pass and the backward
//! rules. All loops are sequential so results are bit-reproducible.

use crate::real::Real;

/// out[m,n] = a[m,k] * b[k,n]
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// out += a * b, accumulating into an existing buffer.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// out[m,n] = a[m,k] * b[n,k]^T
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_nt_acc(a, b, &mut out, m, k, n);
    out
}

pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k,n] = a[m,k]^T * b[m,n]
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Numerically stable softmax over each row; `mask[i*cols+j] == false`
/// entries are excluded and produce exact zeros.
pub fn softmax_rows<T: Real>(x: &[T], rows: usize, cols: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let keep = |j: usize| mask.map_or(true, |m| m[i * cols + j]);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        let mut denom = T::zero();
        let out_row = &mut out[i * cols..(i + 1) * cols];
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                let e = (v - max).exp();
                out_row[j] = e;
                denom += e;
            }
        }
        if denom > T::zero() {
            for o in out_row.iter_mut() {
                *o /= denom;
            }
        }
    }
    out
}

pub const GELU_COEF: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(GELU_COEF);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(GELU_COEF);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

/// Fixed sinusoidal position table: sin half then cos half per row,
/// matching the usual encoder convention.
pub fn sinusoid_table<T: Real>(positions: usize, dim: usize) -> Vec<T> {
    assert!(dim % 2 == 0, "sinusoid dim must be even");
    let half = dim / 2;
    let mut out = vec![T::zero(); positions * dim];
    let log_timescale = (10_000f64).ln() / (half.max(2) - 1) as f64;
    for p in 0..positions {
        for i in 0..half {
            let inv = (-(i as f64) * log_timescale).exp();
            let angle = p as f64 * inv;
            out[p * dim + i] = T::from_f64(angle.sin());
            out[p * dim + half + i] = T::from_f64(angle.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_passthrough() {
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let m = [2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0];
        assert_eq!(matmul(&eye, &m, 3, 3, 3), m.to_vec());
    }

    #[test]
    fn matmul_2x2_hand_product() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let out = softmax_rows(&[0.0f64, 0.0, 0.0], 1, 3, None);
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_mask_zeroes_excluded() {
        let out = softmax_rows(&[5.0f64, 1.0, 1.0], 1, 3, Some(&[false, true, true]));
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.5).abs() < 1e-15);
        assert!((out[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn transpose_round_trip() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let t = transpose(&x, 2, 3);
        assert_eq!(t, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(transpose(&t, 3, 2), x.to_vec());
    }
}
