use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Orthonormal `rows × cols` factor of a seeded Gaussian matrix.
///
/// Computed by Householder QR; the sign of each column is fixed so that the
/// triangular factor has a non-negative diagonal, which makes the result a
/// pure function of `(rows, cols, seed)`.
pub fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Result<Tensor> {
    if cols == 0 || rows < cols {
        return Err(Error::dim(format!(
            "orthonormal_columns needs 1 <= cols <= rows, got rows={rows}, cols={cols}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Tensor::randn(&[rows, cols], &mut rng);
    Ok(householder_q(gauss.data(), rows, cols))
}

/// Thin Q of the QR factorization of a row-major `m × n` matrix (m >= n).
pub(crate) fn householder_q(a: &[f64], m: usize, n: usize) -> Tensor {
    let mut r = a.to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut diag_sign = vec![1.0; n];

    for j in 0..n {
        let norm = (j..m).map(|i| r[i * n + j].powi(2)).sum::<f64>().sqrt();
        let mut v: Vec<f64> = (j..m).map(|i| r[i * n + j]).collect();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            diag_sign[j] = alpha.signum();
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for col in j..n {
            let dot: f64 = (j..m).map(|i| v[i - j] * r[i * n + col]).sum();
            for i in j..m {
                r[i * n + col] -= 2.0 * v[i - j] * dot;
            }
        }
        diag_sign[j] = if r[j * n + j] < 0.0 { -1.0 } else { 1.0 };
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of the identity.
    let mut q = vec![0.0; m * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        for col in 0..n {
            let dot: f64 = (j..m).map(|i| v[i - j] * q[i * n + col]).sum();
            for i in j..m {
                q[i * n + col] -= 2.0 * v[i - j] * dot;
            }
        }
    }
    for i in 0..m {
        for (col, s) in diag_sign.iter().enumerate() {
            q[i * n + col] *= s;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: q,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_deviation(u: &Tensor) -> f64 {
        let g = u.transpose2().matmul(u).unwrap();
        g.max_abs_diff(&Tensor::eye(u.shape()[1]))
    }

    #[test]
    fn single_column_is_unit() {
        let u = orthonormal_columns(1, 1, 7).unwrap();
        assert_eq!(u.data()[0].abs(), 1.0);
    }

    #[test]
    fn gram_is_identity() {
        for seed in 0..5 {
            let u = orthonormal_columns(4, 3, seed).unwrap();
            assert!(gram_deviation(&u) <= 1e-10);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = orthonormal_columns(16, 5, 42).unwrap();
        let b = orthonormal_columns(16, 5, 42).unwrap();
        assert_eq!(a.data(), b.data());
        let c = orthonormal_columns(16, 5, 43).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn rejects_wide() {
        assert!(matches!(orthonormal_columns(3, 4, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn reproduces_factor_with_positive_diagonal() {
        // Q^T A must be upper triangular with a non-negative diagonal.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[6, 4], &mut rng);
        let q = householder_q(a.data(), 6, 4);
        let r = q.transpose2().matmul(&a).unwrap();
        for i in 0..4 {
            assert!(r.at(i, i) >= 0.0);
            for j in 0..i {
                assert!(r.at(i, j).abs() < 1e-12);
            }
        }
        assert!(q.matmul(&r).unwrap().max_abs_diff(&a) < 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn orthonormal_for_all_sizes(d in 1usize..=128, frac in 0.0f64..1.0, seed in 0u64..1000) {
            let k = 1 + ((d - 1) as f64 * frac) as usize;
            let u = orthonormal_columns(d, k, seed).unwrap();
            proptest::prop_assert!(gram_deviation(&u) <= 1e-10);
        }
    }
}
