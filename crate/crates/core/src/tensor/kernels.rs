//! Graph-free numeric kernels shared by the tape and by plain evaluation.

use super::DenseArray;
use crate::error::{shape_err, Error, Result};

/// Overflow-safe softmax of one vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

/// `ln(sum(exp(x)))` computed around the maximum.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Per-row statistics produced by [`layer_norm_rows`], kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_rows(
    x: &DenseArray,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(DenseArray, LayerNormCache)> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::EmptyAxis("layer_norm"));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err(
            "layer_norm",
            format!("last dim {d}, gamma {}, beta {}", gamma.len(), beta.len()),
        ));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be >= 0, got {eps}")));
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row_slice(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = var + eps;
        // zero variance with eps == 0: every centered value is zero anyway
        let rs = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gamma[c] + beta[c];
        }
    }
    Ok((
        DenseArray::from_raw(x.shape().to_vec(), out),
        LayerNormCache { xhat, rstd },
    ))
}

/// Layer normalization over the last dimension with population variance.
pub fn layer_norm(x: &DenseArray, gamma: &[f64], beta: &[f64], eps: f64) -> Result<DenseArray> {
    layer_norm_rows(x, gamma, beta, eps).map(|(y, _)| y)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[42.0]), vec![1.0]);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (a, b) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        // would overflow without the max shift
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let x = DenseArray::row(&[1.0, 2.0, 3.0]);
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 0.0).unwrap();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }

        let c = DenseArray::row(&[7.5, 7.5, 7.5]);
        let y = layer_norm(&c, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let y = layer_norm(&x, &[0.0; 3], &[5.0; 3], 1e-5).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn layer_norm_rejects_bad_affine() {
        let x = DenseArray::row(&[1.0, 2.0]);
        assert!(layer_norm(&x, &[1.0], &[0.0, 0.0], 1e-5).is_err());
        assert!(layer_norm(&x, &[1.0; 2], &[0.0; 2], -1.0).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
