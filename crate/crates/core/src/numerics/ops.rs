//! Dense kernels shared by the graph ops and the tensor-level API.
//!
//! Loop nesting is fixed so that every kernel accumulates in the same order on
//! every call; results are bit-reproducible for a given build.

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;

/// Above this the softplus overflow guard returns `x` unchanged.
pub const SOFTPLUS_LINEAR_CUTOFF: f64 = 30.0;

/// `out[m×n] += a[m×k] · b[k×n]` (i-k-j order).
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(dim_err!("matmul: {m}×{k} · {k2}×{n}"));
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::matrix(m, n, out))
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::matrix(n, m, out)
}

/// In-place max-subtracted softmax of one row.
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

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax_rows: NaN input".into()));
    }
    let mut out = x.clone();
    let cols = x.cols();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(cols) {
        softmax_row(row);
    }
    Ok(out)
}

/// Per-row inverse RMS: `1 / sqrt(mean(x²) + eps)`.
pub fn inv_rms(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        1.0 / denom
    }
}

pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if d == 0 {
        return Err(dim_err!("rms_norm: zero width"));
    }
    if gain.len() != d {
        return Err(dim_err!("rms_norm: gain {} vs width {d}", gain.len()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let r = inv_rms(row, eps);
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v *= r * g;
        }
    }
    Ok(out)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > SOFTPLUS_LINEAR_CUTOFF {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// Causal per-channel convolution along the row (token) axis.
///
/// `kernel` is `w × d`; tap `w - 1` multiplies the current row, tap `0` the row
/// `w - 1` positions earlier. Rows before the start are zero.
pub fn depthwise_conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    let w = kernel.rows();
    if kernel.cols() != d {
        return Err(dim_err!("depthwise_conv1d: kernel width {} vs {d} channels", kernel.cols()));
    }
    let mut out = vec![0.0; n * d];
    depthwise_conv1d_acc(x.data(), kernel.data(), &mut out, n, d, w);
    Ok(Tensor::matrix(n, d, out))
}

pub(crate) fn depthwise_conv1d_acc(x: &[f64], k: &[f64], out: &mut [f64], n: usize, d: usize, w: usize) {
    for row in 0..n {
        let o = &mut out[row * d..(row + 1) * d];
        for t in 0..w {
            // input row = row - (w - 1) + t
            let Some(src) = (row + t).checked_sub(w - 1) else {
                continue;
            };
            let xr = &x[src * d..(src + 1) * d];
            let kr = &k[t * d..(t + 1) * d];
            for c in 0..d {
                o[c] += kr[c] * xr[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.5]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[2, 3]);
        let any = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 - 3.5).collect());
        assert_eq!(matmul(&z, &any).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::matrix(1, 3, vec![0.0; 3])).unwrap();
        assert!(s.data().iter().all(|&v| close(v, 1.0 / 3.0, 1e-15)));

        let s = softmax_rows(&Tensor::matrix(1, 1, vec![123.4])).unwrap();
        assert_eq!(s.data(), &[1.0]);

        let s = softmax_rows(&Tensor::matrix(1, 2, vec![1f64.ln(), 3f64.ln()])).unwrap();
        assert!(close(s.data()[0], 0.25, 1e-15) && close(s.data()[1], 0.75, 1e-15));

        let bad = Tensor::matrix(1, 2, vec![0.0, f64::NAN]);
        assert!(matches!(softmax_rows(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn rms_norm_examples() {
        let x = Tensor::matrix(2, 3, vec![2.5, 2.5, 2.5, -0.7, -0.7, -0.7]);
        let y = rms_norm(&x, &Tensor::full(&[3], 1.0), 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);

        let y = rms_norm(&Tensor::zeros(&[2, 3]), &Tensor::full(&[3], 3.0), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = rms_norm(&x, &Tensor::zeros(&[3]), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_examples() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!(close(softplus_scalar(0.0), std::f64::consts::LN_2, 1e-15));
        assert_eq!(softplus_scalar(40.0), 40.0);
        assert!(close(softplus_scalar(29.0), 29.0, 1e-12));
    }

    #[test]
    fn conv_identity_tap() {
        let x = Tensor::matrix(5, 2, (0..10).map(|v| v as f64 * 0.3 - 1.0).collect());
        let mut k = Tensor::zeros(&[4, 2]);
        k.set(3, 0, 1.0);
        k.set(3, 1, 1.0);
        assert_eq!(depthwise_conv1d(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv_is_causal() {
        // tap 0 with width 2 shifts by one row and zero-pads the first.
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]);
        let k = Tensor::matrix(2, 1, vec![1.0, 0.0]);
        assert_eq!(depthwise_conv1d(&x, &k).unwrap().data(), &[0.0, 1.0, 2.0]);
    }

    fn mat(n: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-2.0f64..2.0, n * n).prop_map(move |v| Tensor::matrix(n, n, v))
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 24)) {
            let s = softmax_rows(&Tensor::matrix(4, 6, v)).unwrap();
            for r in 0..4 {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn matmul_is_associative(a in mat(4), b in mat(4), c in mat(4)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() / scale <= 1e-9);
            }
        }
    }
}
