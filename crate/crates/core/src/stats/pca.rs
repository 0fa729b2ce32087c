//! Principal component analysis for the many-features / few-rows regime.
//!
//! Model dimensionality V can exceed 10^4 while the number of rows n stays
//! in the hundreds, so the decomposition runs on the n x n Gram matrix of
//! the centered rows and lifts eigenvectors back to feature space.

use crate::error::{Error, Result};

/// Fitted PCA basis.
#[derive(Debug, Clone)]
pub struct PcaModel {
    /// Column means of the input.
    pub mean: Vec<f64>,
    /// Top-k principal directions, orthonormal rows of length V. Rows for
    /// eigenvalues at numerical zero are zero vectors.
    pub components: Vec<Vec<f64>>,
    /// Sample variances along the components, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Total sample variance of the input (sum over all directions).
    pub total_variance: f64,
}

impl PcaModel {
    /// Fraction of total variance captured by each kept component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance <= 0.0 {
            return vec![0.0; self.explained_variance.len()];
        }
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvector `j` stored as
/// column `j` of the returned matrix.
#[allow(clippy::needless_range_loop)] // rotations touch two columns of one matrix
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    if n == 0 {
        return (Vec::new(), v);
    }
    let scale: f64 = a
        .iter()
        .flat_map(|row| row.iter().map(|x| x * x))
        .sum::<f64>()
        .sqrt()
        .max(1.0);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum::<f64>()
            .sqrt();
        if off < tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= tol * 1e-2 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for i in 0..n {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[p][i];
                    let aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for row in v.iter_mut() {
                    let vip = row[p];
                    let viq = row[q];
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i][i]).collect();
    (eigenvalues, v)
}

/// Fit PCA on the rows of `x` and project them onto the top `k` components.
///
/// The sign of each component is normalized so its largest-magnitude entry
/// is positive, which makes the output deterministic.
pub fn pca_fit_transform(x: &[Vec<f64>], k: usize) -> Result<(PcaModel, Vec<Vec<f64>>)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Usage("pca needs at least 2 rows".into()));
    }
    let dim = x[0].len();
    if x.iter().any(|row| row.len() != dim) {
        return Err(Error::Config("pca input rows have mixed dimensions".into()));
    }
    if k == 0 || k > n.min(dim) {
        return Err(Error::Usage(format!(
            "pca component count {k} must be in 1..=min(n={n}, dim={dim})"
        )));
    }

    let mut mean = vec![0.0; dim];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = x
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    // Gram matrix of the centered rows.
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[i][j] = dot;
            gram[j][i] = dot;
        }
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eigenvalues[b]
            .partial_cmp(&eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let denom = (n - 1) as f64;
    let total_variance = eigenvalues.iter().map(|l| l.max(0.0)).sum::<f64>() / denom;
    let lambda_floor = 1e-12 * eigenvalues.iter().fold(1.0_f64, |m, &l| m.max(l.abs()));

    let mut components = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let lambda = eigenvalues[idx];
        if lambda <= lambda_floor {
            components.push(vec![0.0; dim]);
            explained.push(0.0);
            continue;
        }
        let inv_sqrt = 1.0 / lambda.sqrt();
        let mut dir = vec![0.0; dim];
        for (i, row) in centered.iter().enumerate() {
            let u = eigenvectors[i][idx] * inv_sqrt;
            if u == 0.0 {
                continue;
            }
            for (d, val) in dir.iter_mut().zip(row) {
                *d += u * val;
            }
        }
        // Deterministic sign: largest-magnitude entry made positive.
        let mut pivot = 0;
        for (i, v) in dir.iter().enumerate() {
            if v.abs() > dir[pivot].abs() {
                pivot = i;
            }
        }
        if dir[pivot] < 0.0 {
            for v in &mut dir {
                *v = -*v;
            }
        }
        components.push(dir);
        explained.push(lambda / denom);
    }

    let projected: Vec<Vec<f64>> = centered
        .iter()
        .map(|row| {
            components
                .iter()
                .map(|c| c.iter().zip(row).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();

    Ok((
        PcaModel {
            mean,
            components,
            explained_variance: explained,
            total_variance,
        },
        projected,
    ))
}
