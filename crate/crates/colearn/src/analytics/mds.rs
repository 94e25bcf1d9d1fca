//! Classical (Torgerson) multidimensional scaling: double-center the squared
//! distance matrix and embed along the top eigenvectors. Dependency-free; the
//! symmetric eigenproblem is solved with cyclic Jacobi rotations, which is
//! deterministic and ample for the point counts involved here.

use super::stats::pearson;
use crate::error::{Error, Result};

/// A 2-d (or `dim`-d) embedding plus the Pearson correlation between input
/// distances and embedded Euclidean distances. The coordinates carry no
/// meaning beyond pairwise geometry (any rotation/translation is equivalent);
/// only the correlation statistic is contract-bearing.
#[derive(Debug, Clone)]
pub struct MdsEmbedding {
    pub coords: Vec<Vec<f64>>,
    pub correlation: Option<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
/// Returns eigenvalues (descending) and matching eigenvectors as rows.
pub(crate) fn jacobi_eigh(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
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
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|i| (a[i * n + i], (0..n).map(|k| v[k * n + i]).collect()))
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("finite eigenvalues"));
    let (vals, vecs) = pairs.into_iter().unzip();
    (vals, vecs)
}

/// Embeds an `n x n` distance matrix into `dim` coordinates. A fully
/// degenerate (all-zero) matrix embeds to coincident points with the
/// correlation reported as undefined.
pub fn mds_embed(distances: &[f64], n: usize, dim: usize) -> Result<MdsEmbedding> {
    if distances.len() != n * n {
        return Err(Error::Shape(format!(
            "distance matrix of {} entries is not {n}x{n}",
            distances.len()
        )));
    }
    if dim == 0 || n == 0 {
        return Err(Error::Config("mds needs n >= 1 points and dim >= 1".into()));
    }

    // B = -1/2 J D^2 J via the closed double-centering form.
    let d2: Vec<f64> = distances.iter().map(|d| d * d).collect();
    let row_mean: Vec<f64> = (0..n)
        .map(|i| d2[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            b[i * n + j] = -0.5 * (d2[i * n + j] - row_mean[i] - row_mean[j] + grand);
        }
    }

    let (vals, vecs) = jacobi_eigh(&b, n);
    let mut coords = vec![vec![0.0f64; dim]; n];
    for k in 0..dim.min(n) {
        let scale = vals[k].max(0.0).sqrt();
        for (i, c) in coords.iter_mut().enumerate() {
            c[k] = vecs[k][i] * scale;
        }
    }

    // Fidelity statistic: correlation between input and embedded distances.
    let mut input_d = Vec::with_capacity(n * (n - 1) / 2);
    let mut embed_d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            input_d.push(distances[i * n + j]);
            let dist: f64 = (0..dim)
                .map(|k| (coords[i][k] - coords[j][k]).powi(2))
                .sum::<f64>()
                .sqrt();
            embed_d.push(dist);
        }
    }
    let correlation = pearson(&input_d, &embed_d);

    Ok(MdsEmbedding {
        coords,
        correlation,
        eigenvalues: vals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted_distances(points: &[(f64, f64)]) -> Vec<f64> {
        let n = points.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let dx = points[i].0 - points[j].0;
                let dy = points[i].1 - points[j].1;
                d[i * n + j] = (dx * dx + dy * dy).sqrt();
            }
        }
        d
    }

    #[test]
    fn recovers_planted_2d_configuration() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (0.3, 2.0), (-1.5, 0.7), (0.8, -0.9)];
        let d = planted_distances(&pts);
        let emb = mds_embed(&d, pts.len(), 2).unwrap();
        let r = emb.correlation.unwrap();
        assert!(r > 1.0 - 1e-6, "correlation {r}");
    }

    #[test]
    fn degenerate_matrix_reports_undefined_correlation() {
        let emb = mds_embed(&vec![0.0; 9], 3, 2).unwrap();
        assert!(emb.correlation.is_none());
        for c in &emb.coords {
            assert!(c.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn jacobi_matches_known_eigensystem() {
        // [[2, 1], [1, 2]] has eigenvalues 3 and 1.
        let (vals, vecs) = jacobi_eigh(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // Eigenvector of 3 is (1,1)/sqrt(2) up to sign.
        assert!((vecs[0][0].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }
}
