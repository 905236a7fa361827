//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition
//! and the inverse matrix square root built on it.
//!
//! Reference matrices here are channel-count sized (a few dozen rows at
//! most), so the quadratically convergent Jacobi sweep is plenty.

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix: `a = V diag(values) Vᵀ`.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// `vectors[j]` is the eigenvector paired with `values[j]`.
    pub vectors: Vec<Vec<f64>>,
}

/// Cyclic Jacobi rotations until the off-diagonal mass vanishes.
pub fn sym_eigen(a: &[f64], n: usize) -> Result<SymEigen> {
    if a.len() != n * n {
        return Err(Error::InvalidArgument(format!(
            "sym_eigen: matrix buffer has {} entries for n={n}",
            a.len()
        )));
    }
    let sym_tol = 1e-10
        * a.iter()
            .fold(0.0_f64, |m, &v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[i * n + j] - a[j * n + i]).abs() > sym_tol {
                return Err(Error::Numerical(format!(
                    "sym_eigen: matrix is not symmetric at ({i},{j}): {} vs {}",
                    a[i * n + j],
                    a[j * n + i]
                )));
            }
        }
    }

    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        let scale: f64 = (0..n).map(|i| m[i * n + i] * m[i * n + i]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // stable tan of the rotation angle
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
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

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[i * n + i]
            .partial_cmp(&m[j * n + j])
            .expect("eigenvalues are finite")
    });
    let values: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&j| (0..n).map(|k| v[k * n + j]).collect())
        .collect();
    Ok(SymEigen { values, vectors })
}

/// `a^{-1/2}` for a symmetric positive-definite matrix, via
/// `V diag(λ^{-1/2}) Vᵀ`. Errors if any eigenvalue is non-positive,
/// naming the smallest one.
pub fn inv_sqrt_spd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let eig = sym_eigen(a, n)?;
    let smallest = eig.values[0];
    if smallest <= 0.0 {
        return Err(Error::Numerical(format!(
            "inverse square root needs a positive-definite matrix; \
             smallest eigenvalue is {smallest:e}"
        )));
    }
    let inv_sqrt: Vec<f64> = eig.values.iter().map(|&l| 1.0 / l.sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for (j, vec_j) in eig.vectors.iter().enumerate() {
        let w = inv_sqrt[j];
        for r in 0..n {
            let vr = vec_j[r] * w;
            for c in 0..n {
                out[r * n + c] += vr * vec_j[c];
            }
        }
    }
    Ok(out)
}

/// C = A·B for square row-major n×n buffers.
pub fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for p in 0..n {
            let aip = a[i * n + p];
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

pub fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_eigen() {
        let eig = sym_eigen(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert!((eig.values[0] - 1.0).abs() < 1e-14);
        assert!((eig.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn diagonal_inv_sqrt() {
        let m = inv_sqrt_spd(&[4.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-14);
        assert!((m[3] - 1.0).abs() < 1e-14);
        assert!(m[1].abs() < 1e-14 && m[2].abs() < 1e-14);
    }

    #[test]
    fn reconstruction_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2usize, 5, 8, 22] {
            // SPD from AᵀA + I
            let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut spd = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += a[k * n + i] * a[k * n + j];
                    }
                    spd[i * n + j] = s + if i == j { 1.0 } else { 0.0 };
                }
            }
            let m = inv_sqrt_spd(&spd, n).unwrap();
            let prod = matmul_sq(&matmul_sq(&m, &spd, n), &m, n);
            let mut diff = prod.clone();
            for i in 0..n {
                diff[i * n + i] -= 1.0;
            }
            assert!(
                frobenius(&diff) < 1e-8,
                "n={n}: reconstruction error {}",
                frobenius(&diff)
            );
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        assert!(sym_eigen(&[1.0, 2.0, 3.0, 1.0], 2).is_err());
    }

    #[test]
    fn indefinite_matrix_names_smallest_eigenvalue() {
        let err = inv_sqrt_spd(&[1.0, 0.0, 0.0, -2.0], 2).unwrap_err();
        assert!(err.to_string().contains("-2"), "got: {err}");
    }
}
