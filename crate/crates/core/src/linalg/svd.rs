//! Singular values of small dense matrices via one-sided Jacobi.
//!
//! Accuracy over speed: internal computation is always `f64`, and the
//! rotation sweep runs until all column pairs are numerically orthogonal.

use super::matrix::{Matrix, Scalar};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;
const ORTHO_TOL: f64 = 1e-14;
pub const MAX_SVD_DIM: usize = 1024;

/// Singular values of `m`, sorted descending.
pub fn svd_values<S: Scalar>(m: &Matrix<S>) -> Result<Vec<S>> {
    if !m.all_finite() {
        return Err(Error::Numeric("svd_values: non-finite input".into()));
    }
    let small = m.rows().min(m.cols());
    if small > MAX_SVD_DIM {
        return Err(Error::Config(format!(
            "svd_values: min dimension {small} exceeds supported {MAX_SVD_DIM}"
        )));
    }
    if small == 0 {
        return Ok(Vec::new());
    }
    // Work on tall orientation so the rotated columns are the short axis.
    let work = if m.rows() >= m.cols() {
        m.to_f64_matrix()
    } else {
        m.to_f64_matrix().transpose()
    };
    let (rows, cols) = (work.rows(), work.cols());
    // Column-major copy for cache-friendly rotations.
    let mut col: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| work.get(i, j)).collect())
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let (cp, cq) = {
                    let (a, b) = col.split_at_mut(q);
                    (&mut a[p], &mut b[0])
                };
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..rows {
                    alpha += cp[i] * cp[i];
                    beta += cq[i] * cq[i];
                    gamma += cp[i] * cq[i];
                }
                if gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let vp = cp[i];
                    let vq = cq[i];
                    cp[i] = c * vp - s * vq;
                    cq[i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = col
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma.into_iter().map(S::from_f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_rows(&[
            &[3.0f64, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[0.0, 0.0, 2.0],
        ])
        .unwrap();
        let s = svd_values(&m).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12);
        assert!((s[1] - 2.0).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shear_matrix_matches_characteristic_roots() {
        // Singular values of [[1,1],[0,1]] are the square roots of the
        // eigenvalues of M^T M, i.e. the roots of x^2 - 3x + 1.
        let m = Matrix::from_rows(&[&[1.0f64, 1.0], &[0.0, 1.0]]).unwrap();
        let s = svd_values(&m).unwrap();
        assert!((s[0] - 1.618034).abs() < 1e-6);
        assert!((s[1] - 0.618034).abs() < 1e-6);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0f64, -2.0, 0.5];
        let v = [3.0f64, 4.0];
        let m = Matrix::from_fn(3, 2, |i, j| u[i] * v[j]);
        let s = svd_values(&m).unwrap();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((s[0] - nu * nv).abs() < 1e-10);
        assert!(s[1].abs() < 1e-10);
    }

    #[test]
    fn energy_is_preserved() {
        let mut rng = crate::linalg::Rng::new(17);
        for &(r, c) in &[(8usize, 8usize), (16, 5), (5, 16), (64, 64)] {
            let m: Matrix<f64> = rng.normal_matrix(r, c, 1.0);
            let s = svd_values(&m).unwrap();
            let energy: f64 = s.iter().map(|v| v * v).sum();
            let fro = m.frobenius_sq();
            assert!(
                (energy - fro).abs() <= 1e-8 * fro,
                "{r}x{c}: {energy} vs {fro}"
            );
        }
    }

    #[test]
    fn wide_and_tall_agree() {
        let mut rng = crate::linalg::Rng::new(23);
        let m: Matrix<f64> = rng.normal_matrix(4, 9, 1.0);
        let a = svd_values(&m).unwrap();
        let b = svd_values(&m.transpose()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_input_errors() {
        let m = Matrix::from_rows(&[&[1.0f64, f64::NAN]]).unwrap();
        assert!(svd_values(&m).is_err());
    }
}
