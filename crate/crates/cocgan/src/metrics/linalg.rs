//! Dense symmetric eigendecomposition (cyclic Jacobi) and the PSD matrix
//! square root built on it. Everything here runs in f64; the matrices are
//! small (feature dimension squared).

use crate::error::Error;

/// Eigendecomposition of a symmetric matrix (row-major `n x n`).
/// Returns eigenvalues and the orthonormal eigenvector matrix `V`
/// (column `j` pairs with eigenvalue `j`), satisfying `A = V diag(l) V^T`.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>), Error> {
    assert_eq!(a.len(), n * n, "matrix size mismatch");
    let mut m = a.to_vec();
    // symmetry is a precondition; tolerate round-off by averaging
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1e-300);
    let tol = 1e-15 * scale;

    let max_sweeps = 64;
    for _sweep in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(m[p * n + q].abs());
            }
        }
        if off <= tol {
            let eig = (0..n).map(|i| m[i * n + i]).collect();
            return Ok((eig, v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // rotate rows/columns p and q
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi eigensolver did not converge in {max_sweeps} sweeps (n={n})"
    )))
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// (round-off) are clamped to zero.
pub fn sqrtm_psd(a: &[f64], n: usize) -> Result<Vec<f64>, Error> {
    let (eig, v) = symmetric_eigen(a, n)?;
    let roots: Vec<f64> = eig.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // V diag(roots) V^T
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += v[i * n + k] * roots[k] * v[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(out)
}

pub fn matmul_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let s = a[i * k + kk];
            if s == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += s * b[kk * n + j];
            }
        }
    }
    c
}

pub fn trace(a: &[f64], n: usize) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-1.0..1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        a
    }

    fn random_psd(n: usize, seed: u64) -> Vec<f64> {
        // B^T B is PSD
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    a[i * n + j] += b[k * n + i] * b[k * n + j];
                }
            }
        }
        a
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        for seed in 0..5 {
            let n = 6;
            let a = random_symmetric(n, seed);
            let (eig, v) = symmetric_eigen(&a, n).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += v[i * n + k] * eig[k] * v[j * n + k];
                    }
                    assert!((acc - a[i * n + j]).abs() < 1e-10, "seed {seed} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn eigenvectors_are_orthonormal() {
        let n = 8;
        let a = random_symmetric(n, 42);
        let (_, v) = symmetric_eigen(&a, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for k in 0..n {
                    dot += v[k * n + i] * v[k * n + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eigen_matches_nalgebra_oracle() {
        for seed in 0..5 {
            let n = 5;
            let a = random_symmetric(n, 100 + seed);
            let (mut eig, _) = symmetric_eigen(&a, n).unwrap();
            let na = nalgebra::DMatrix::from_row_slice(n, n, &a);
            let mut oracle: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
            eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
            oracle.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (g, o) in eig.iter().zip(&oracle) {
                assert!((g - o).abs() < 1e-10, "seed {seed}: {g} vs {o}");
            }
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        for seed in 0..5 {
            let n = 6;
            let a = random_psd(n, 200 + seed);
            let s = sqrtm_psd(&a, n).unwrap();
            let ss = matmul_f64(&s, &s, n, n, n);
            for (x, y) in ss.iter().zip(&a) {
                assert!((x - y).abs() < 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn sqrtm_of_zero_matrix_is_zero() {
        let s = sqrtm_psd(&[0.0; 9], 3).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }
}
