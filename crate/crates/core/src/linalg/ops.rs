//! Elementwise nonlinearities, normalization and divergence primitives.

use super::matrix::{Matrix, Scalar};
use crate::error::{Error, Result};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via the exact error function (not the tanh fit).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// GELU: `x * Phi(x)` with the Gaussian CDF evaluated exactly.
pub fn gelu<S: Scalar>(x: S) -> S {
    let v = x.to_f64();
    S::from_f64(v * normal_cdf(v))
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)`.
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let v = x.to_f64();
    S::from_f64(normal_cdf(v) + v * normal_pdf(v))
}

/// Per-vector standardization followed by an affine scale and shift.
pub fn layer_norm<S: Scalar>(x: &[S], gamma: &[S], beta: &[S], eps: S) -> Result<Vec<S>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::Dim(format!(
            "layer_norm: lengths {} / {} / {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if eps < S::ZERO {
        return Err(Error::Config("layer_norm: eps must be >= 0".into()));
    }
    let n = S::from_f64(x.len() as f64);
    let mut mean = S::ZERO;
    for &v in x {
        mean += v;
    }
    mean = mean / n;
    let mut var = S::ZERO;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    let inv_std = S::ONE / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| g * ((v - mean) * inv_std) + b)
        .collect())
}

/// Cache kept by [`layer_norm_rows`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<S: Scalar> {
    /// Standardized rows `(x - mean) / std`.
    pub xhat: Matrix<S>,
    pub inv_std: Vec<S>,
}

/// Row-wise layer norm over a batch, returning output and backward cache.
pub fn layer_norm_rows<S: Scalar>(
    x: &Matrix<S>,
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> Result<(Matrix<S>, LayerNormCache<S>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dim("layer_norm_rows: parameter length mismatch".into()));
    }
    let n = S::from_f64(d as f64);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut inv_stds = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut mean = S::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = S::ZERO;
        for &v in row {
            let dvi = v - mean;
            var += dvi * dvi;
        }
        var = var / n;
        let inv_std = S::ONE / (var + eps).sqrt();
        inv_stds.push(inv_std);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * inv_std;
        }
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = gamma[j] * xh[j] + beta[j];
        }
    }
    Ok((
        out,
        LayerNormCache {
            xhat,
            inv_std: inv_stds,
        },
    ))
}

/// Backward through [`layer_norm_rows`]. Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_rows_backward<S: Scalar>(
    cache: &LayerNormCache<S>,
    gamma: &[S],
    d_out: &Matrix<S>,
) -> (Matrix<S>, Vec<S>, Vec<S>) {
    let (rows, d) = (d_out.rows(), d_out.cols());
    let n = S::from_f64(d as f64);
    let mut dx = Matrix::zeros(rows, d);
    let mut dgamma = vec![S::ZERO; d];
    let mut dbeta = vec![S::ZERO; d];
    for i in 0..rows {
        let go = d_out.row(i);
        let xh = cache.xhat.row(i);
        let mut mean_dxhat = S::ZERO;
        let mut mean_dxhat_xhat = S::ZERO;
        for j in 0..d {
            let dxhat = go[j] * gamma[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh[j];
            dgamma[j] += go[j] * xh[j];
            dbeta[j] += go[j];
        }
        mean_dxhat = mean_dxhat / n;
        mean_dxhat_xhat = mean_dxhat_xhat / n;
        let inv_std = cache.inv_std[i];
        let dxi = dx.row_mut(i);
        for j in 0..d {
            let dxhat = go[j] * gamma[j];
            dxi[j] = inv_std * (dxhat - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows<S: Scalar>(m: &Matrix<S>) -> Matrix<S> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_slice(out.row_mut(i));
    }
    out
}

/// In-place softmax of one slice.
pub fn softmax_slice<S: Scalar>(row: &mut [S]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = S::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Smoothed Kullback-Leibler divergence `sum p ln((p+eps)/(q+eps))`.
///
/// The smoothing is applied symmetrically to both arguments, so the value at
/// a one-hot `p` deviates from the unsmoothed limit by O(eps).
pub fn kl_divergence<S: Scalar>(p: &[S], q: &[S], eps: S) -> Result<S> {
    if p.len() != q.len() {
        return Err(Error::Dim(format!(
            "kl_divergence: lengths {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = S::ZERO;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi != S::ZERO {
            acc += pi * ((pi + eps) / (qi + eps)).ln();
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Phi(x) by Simpson quadrature of the Gaussian density; independent of erf.
    fn cdf_oracle(x: f64) -> f64 {
        let n = 4000;
        let h = x / n as f64;
        let f = |t: f64| INV_SQRT_2PI * (-0.5 * t * t).exp();
        let mut acc = f(0.0) + f(x);
        for i in 1..n {
            let t = i as f64 * h;
            acc += if i % 2 == 1 { 4.0 * f(t) } else { 2.0 * f(t) };
        }
        0.5 + acc * h / 3.0
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn gelu_at_one_matches_quadrature_oracle() {
        let expect = 1.0 * cdf_oracle(1.0);
        assert!((gelu(1.0f64) - expect).abs() < 1e-9);
        assert!((gelu(1.0f64) - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn gelu_vanishes_in_the_left_tail() {
        assert!(gelu(-10.0f64).abs() < 1e-8);
    }

    #[test]
    fn gelu_grad_matches_central_differences() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let x = [3.0f64; 5];
        let gamma = [1.0; 5];
        let beta = [0.0; 5];
        let out = layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        for v in out {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = [1.0f64, 3.0];
        let out = layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-12);
        assert!((out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_output_has_zero_mean_unit_variance() {
        let mut rng = crate::linalg::Rng::new(3);
        let x: Vec<f64> = (0..64).map(|_| rng.normal() * 4.0 + 1.0).collect();
        let ones = vec![1.0; 64];
        let zeros = vec![0.0; 64];
        let out = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        let mean = out.iter().sum::<f64>() / 64.0;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_length_mismatch_errors() {
        let r = layer_norm(&[1.0f64, 2.0], &[1.0], &[0.0, 0.0], 1e-6);
        assert!(r.is_err());
    }

    #[test]
    fn softmax_uniform_on_zero_rows() {
        let m: Matrix<f64> = Matrix::zeros(2, 4);
        let s = softmax_rows(&m);
        for i in 0..2 {
            for j in 0..4 {
                assert!((s.get(i, j) - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_hand_value() {
        let m = Matrix::from_rows(&[&[3.0f64.ln(), 0.0]]).unwrap();
        let s = softmax_rows(&m);
        assert!((s.get(0, 0) - 0.75).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let m = Matrix::from_rows(&[&[0.4f64, -1.3, 2.2]]).unwrap();
        let shifted = m.map(|v| v + 17.5);
        let a = softmax_rows(&m);
        let b = softmax_rows(&shifted);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn kl_identity_is_zero() {
        let p = [0.2f64, 0.5, 0.3];
        let v = kl_divergence(&p, &p, 1e-12).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn kl_hand_value() {
        let v = kl_divergence(&[0.75f64, 0.25], &[0.5, 0.5], 1e-12).unwrap();
        assert!((v - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn kl_one_hot_limit() {
        let v = kl_divergence(&[1.0f64, 0.0], &[0.5, 0.5], 1e-12).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn kl_length_mismatch_errors() {
        assert!(kl_divergence(&[1.0f64], &[0.5, 0.5], 1e-12).is_err());
    }

    #[test]
    fn batched_layer_norm_matches_vector_form() {
        let mut rng = crate::linalg::Rng::new(8);
        let x: Matrix<f64> = rng.normal_matrix(3, 6, 2.0);
        let gamma: Vec<f64> = (0..6).map(|i| 0.5 + i as f64 * 0.1).collect();
        let beta: Vec<f64> = (0..6).map(|i| i as f64 * 0.2 - 0.3).collect();
        let (out, _) = layer_norm_rows(&x, &gamma, &beta, 1e-6).unwrap();
        for i in 0..3 {
            let expect = layer_norm(x.row(i), &gamma, &beta, 1e-6).unwrap();
            for j in 0..6 {
                assert!((out.get(i, j) - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = crate::linalg::Rng::new(21);
        let x: Matrix<f64> = rng.normal_matrix(2, 5, 1.0);
        let gamma: Vec<f64> = rng.normal_vec(5, 0.5).iter().map(|v| v + 1.0).collect();
        let beta: Vec<f64> = rng.normal_vec(5, 0.5);
        let upstream: Matrix<f64> = rng.normal_matrix(2, 5, 1.0);
        let loss = |x: &Matrix<f64>| -> f64 {
            let (out, _) = layer_norm_rows(x, &gamma, &beta, 1e-6).unwrap();
            out.data()
                .iter()
                .zip(upstream.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, cache) = layer_norm_rows(&x, &gamma, &beta, 1e-6).unwrap();
        let (dx, _, _) = layer_norm_rows_backward(&cache, &gamma, &upstream);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp.set(i, j, x.get(i, j) + h);
                let mut xm = x.clone();
                xm.set(i, j, x.get(i, j) - h);
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!(
                    (dx.get(i, j) - fd).abs() < 1e-6,
                    "dx[{i},{j}] = {} vs fd {}",
                    dx.get(i, j),
                    fd
                );
            }
        }
    }
}
