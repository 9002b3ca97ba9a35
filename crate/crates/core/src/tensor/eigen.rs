//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Intended for the Gram and covariance matrices produced by the geometry
//! metrics (a few hundred rows at most). Inputs above [`MAX_JACOBI_DIM`] are
//! rejected.

use super::Matrix;
use crate::error::{Error, Result};

pub const MAX_JACOBI_DIM: usize = 1024;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues in ascending order with matching unit eigenvectors.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub dim: usize,
    pub values: Vec<f64>,
    /// Column `k` (stored row-major, `dim × dim`) is the eigenvector of `values[k]`.
    pub vectors: Vec<f64>,
}

impl SymEigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.dim).map(|r| self.vectors[r * self.dim + k]).collect()
    }

    /// `Q Λ Qᵀ`, row-major.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n)
                    .map(|k| self.vectors[i * n + k] * self.values[k] * self.vectors[j * n + k])
                    .sum();
            }
        }
        out
    }
}

/// Eigenvalues (ascending) of a symmetric `f32` matrix.
pub fn sym_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() != m.cols() {
        return Err(Error::Contract(format!(
            "eigendecomposition needs a square matrix, got {:?}",
            m.shape()
        )));
    }
    let data: Vec<f64> = m.as_slice().iter().map(|&v| v as f64).collect();
    Ok(jacobi(m.rows(), data, false)?.values)
}

/// Eigenvalues (ascending) of a symmetric row-major `f64` matrix.
pub fn sym_eigenvalues_f64(n: usize, data: &[f64]) -> Result<Vec<f64>> {
    Ok(jacobi(n, data.to_vec(), false)?.values)
}

/// Full decomposition of a symmetric row-major `f64` matrix.
pub fn sym_eigen(n: usize, data: &[f64]) -> Result<SymEigen> {
    jacobi(n, data.to_vec(), true)
}

fn check_symmetric(n: usize, a: &[f64]) -> Result<()> {
    if a.len() != n * n {
        return Err(Error::Contract(format!(
            "expected {n}x{n} = {} entries, got {}",
            n * n,
            a.len()
        )));
    }
    if n > MAX_JACOBI_DIM {
        return Err(Error::Contract(format!(
            "matrix dimension {n} exceeds the Jacobi limit {MAX_JACOBI_DIM}"
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("matrix has non-finite entries".into()));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-5 * scale.max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[i * n + j] - a[j * n + i]).abs() > tol {
                return Err(Error::Contract(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a[i * n + j],
                    a[j * n + i]
                )));
            }
        }
    }
    Ok(())
}

fn jacobi(n: usize, mut a: Vec<f64>, want_vectors: bool) -> Result<SymEigen> {
    check_symmetric(n, &a)?;
    // Symmetrize exactly so rotations see a consistent matrix.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let mut v = if want_vectors {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        v
    } else {
        Vec::new()
    };

    let total: f64 = a.iter().map(|x| x * x).sum();
    let threshold = total * 1e-30;

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off <= threshold || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    let new_kp = c * akp - s * akq;
                    let new_kq = s * akp + c * akq;
                    a[k * n + p] = new_kp;
                    a[p * n + k] = new_kp;
                    a[k * n + q] = new_kq;
                    a[q * n + k] = new_kq;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                if want_vectors {
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = if want_vectors {
        let mut sorted = vec![0.0; n * n];
        for (new_k, &old_k) in order.iter().enumerate() {
            for r in 0..n {
                sorted[r * n + new_k] = v[r * n + old_k];
            }
        }
        sorted
    } else {
        Vec::new()
    };
    Ok(SymEigen {
        dim: n,
        values,
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RandomStream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_orthogonal(n: usize, seed: u64) -> Vec<f64> {
        // Gram-Schmidt on a Gaussian matrix (columns).
        let mut rng = RandomStream::new(seed, "test/orthogonal", n as u64).rng();
        let mut q = vec![0.0f64; n * n];
        for c in 0..n {
            let mut col: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for prev in 0..c {
                let proj: f64 = (0..n).map(|r| col[r] * q[r * n + prev]).sum();
                for r in 0..n {
                    col[r] -= proj * q[r * n + prev];
                }
            }
            let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            for r in 0..n {
                q[r * n + c] = col[r] / norm;
            }
        }
        q
    }

    /// Bisection oracle: eigenvalues are the roots of det(A - λI), evaluated by
    /// Gaussian elimination with partial pivoting.
    fn det_shifted(n: usize, a: &[f64], lambda: f64) -> f64 {
        let mut m: Vec<f64> = a.to_vec();
        for i in 0..n {
            m[i * n + i] -= lambda;
        }
        let mut det = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
                .unwrap();
            if m[pivot * n + col] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for k in 0..n {
                    m.swap(pivot * n + k, col * n + k);
                }
                det = -det;
            }
            let p = m[col * n + col];
            det *= p;
            for r in (col + 1)..n {
                let f = m[r * n + col] / p;
                for k in col..n {
                    m[r * n + k] -= f * m[col * n + k];
                }
            }
        }
        det
    }

    fn char_poly_roots(n: usize, a: &[f64], lo: f64, hi: f64, steps: usize) -> Vec<f64> {
        let mut roots = Vec::new();
        let h = (hi - lo) / steps as f64;
        let mut x0 = lo;
        let mut f0 = det_shifted(n, a, x0);
        for s in 1..=steps {
            let x1 = lo + h * s as f64;
            let f1 = det_shifted(n, a, x1);
            if f0 == 0.0 {
                roots.push(x0);
            } else if f0.signum() != f1.signum() && f1 != 0.0 {
                let (mut l, mut r, mut fl) = (x0, x1, f0);
                for _ in 0..200 {
                    let m = 0.5 * (l + r);
                    let fm = det_shifted(n, a, m);
                    if fm.signum() == fl.signum() {
                        l = m;
                        fl = fm;
                    } else {
                        r = m;
                    }
                }
                roots.push(0.5 * (l + r));
            }
            x0 = x1;
            f0 = f1;
        }
        roots
    }

    #[test]
    fn identity_eigenvalues() {
        let vals = sym_eigenvalues(&Matrix::identity(3)).unwrap();
        assert_eq!(vals, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_eigenvalues_sorted() {
        let vals = sym_eigenvalues(&Matrix::from_diag(&[5.0, 2.0, 9.0])).unwrap();
        assert_eq!(vals, vec![2.0, 5.0, 9.0]);
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(
            sym_eigenvalues(&Matrix::zeros(2, 3)),
            Err(Error::Contract(_))
        ));
        let asym = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eigenvalues(&asym), Err(Error::Contract(_))));
    }

    #[test]
    fn gram_of_random_6x6_matches_characteristic_polynomial_oracle() {
        let n = 6;
        let mut rng = RandomStream::new(7, "test/eigen-ata", 0).rng();
        let a: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let mut ata = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                ata[i * n + j] = (0..n).map(|k| a[k * n + i] * a[k * n + j]).sum();
            }
        }
        let trace: f64 = (0..n).map(|i| ata[i * n + i]).sum();
        let oracle = char_poly_roots(n, &ata, -1e-3, trace + 1.0, 200_000);
        assert_eq!(oracle.len(), n, "oracle found {oracle:?}");
        let vals = sym_eigenvalues_f64(n, &ata).unwrap();
        for (v, o) in vals.iter().zip(&oracle) {
            assert_abs_diff_eq!(*v, *o, epsilon = 1e-6);
        }
    }

    #[test]
    fn reconstruction_error_small() {
        let n = 12;
        let mut rng = RandomStream::new(3, "test/eigen-recon", 0).rng();
        let b: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = b[i * n + j] + b[j * n + i];
            }
        }
        let eig = sym_eigen(n, &s).unwrap();
        let r = eig.reconstruct();
        let err: f64 = r.iter().zip(&s).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err / norm < 1e-4, "relative error {}", err / norm);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn recovers_planted_spectrum(n in 1usize..=64, seed in any::<u64>()) {
            let q = random_orthogonal(n, seed);
            let mut rng = RandomStream::new(seed, "test/planted", 0).rng();
            let mut diag: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = (0..n).map(|k| q[i * n + k] * diag[k] * q[j * n + k]).sum();
                }
            }
            let vals = sym_eigenvalues_f64(n, &m).unwrap();
            diag.sort_by(f64::total_cmp);
            for (v, d) in vals.iter().zip(&diag) {
                prop_assert!((v - d).abs() < 1e-6, "{v} vs {d}");
            }
        }

        #[test]
        fn psd_eigenvalues_nonnegative(rows in 1usize..20, cols in 1usize..20, seed in any::<u64>()) {
            let mut rng = RandomStream::new(seed, "test/psd", 0).rng();
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let f = Matrix::from_vec(rows, cols, data).unwrap();
            let vals = sym_eigenvalues_f64(rows, &f.gram_f64()).unwrap();
            let max = vals.last().copied().unwrap_or(0.0);
            prop_assert!(vals.iter().all(|&v| v >= -1e-6 * max.abs().max(1e-300)));
        }
    }
}
