//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Used as the ground truth for power-iteration-based orientation averaging
//! and for singular value checks on small Gram matrices.

/// Full eigendecomposition of a symmetric `n x n` matrix given in row-major
/// order. Returns `(eigenvalues, eigenvectors)` sorted by descending
/// eigenvalue; `eigenvectors[k]` is the unit eigenvector for `eigenvalues[k]`.
pub fn sym_eig(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(a.len(), n * n, "sym_eig: matrix size mismatch");
    let mut m = a.to_vec();
    // v starts as the identity and accumulates the rotations.
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // Stable tangent of the rotation angle.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
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
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .expect("sym_eig: non-finite eigenvalue")
    });
    let vals: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let vecs: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (vals, vecs)
}

/// Dominant eigenvector of the scatter matrix `sum_i f_i f_i^T` of a set of
/// d-vectors, via the full Jacobi decomposition.
pub fn scatter_dominant(features: &[Vec<f64>]) -> Vec<f64> {
    let d = features[0].len();
    let mut m = vec![0.0; d * d];
    for f in features {
        for r in 0..d {
            for c in 0..d {
                m[r * d + c] += f[r] * f[c];
            }
        }
    }
    let (_, vecs) = sym_eig(&m, d);
    vecs[0].clone()
}

/// Distance between lines: 1 - |a . b| for unit vectors.
pub fn line_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - dot.abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_eigenpairs() {
        let a = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        let (vals, vecs) = sym_eig(&a, 3);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
        assert!((vals[2] - 1.0).abs() < 1e-12);
        assert!(vecs[0][0].abs() > 0.999999);
    }

    #[test]
    fn reconstructs_random_symmetric() {
        let mut rng = crate::SplitMix64::new(7);
        let n = 6;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rng.uniform(-1.0, 1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let (vals, vecs) = sym_eig(&a, n);
        // A v = lambda v for every pair.
        for (lam, v) in vals.iter().zip(&vecs) {
            for r in 0..n {
                let av: f64 = (0..n).map(|c| a[r * n + c] * v[c]).sum();
                assert!((av - lam * v[r]).abs() < 1e-9, "residual too large");
            }
        }
    }
}
