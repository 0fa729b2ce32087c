//! Shared numerical building blocks for the detectors: PCA, Gaussian
//! mixtures with BIC model selection, and clustering quality measures.

pub mod gmm;
pub mod pca;

pub use gmm::{gmm_fit, select_k_bic, GmmModel};
pub use pca::{pca_fit_transform, PcaModel};

/// Mean silhouette coefficient of a labeled partition under Euclidean
/// distance. Points in singleton clusters score 0, matching the usual
/// convention; a single-cluster labeling scores 0 overall.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    assert_eq!(n, labels.len(), "silhouette needs one label per point");
    if n == 0 {
        return 0.0;
    }
    let clusters: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    if clusters.len() < 2 {
        return 0.0;
    }
    let dist = |i: usize, j: usize| -> f64 {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if own.is_empty() {
            continue; // singleton scores 0
        }
        let a = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for &c in &clusters {
            if c == labels[i] {
                continue;
            }
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mean = members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64;
            b = b.min(mean);
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_hand_computed_case() {
        // Two pairs on a line: {0, 1} and {10, 11}.
        // Outer points (0 and 11): a = 1, b = (10 + 11)/2 = 10.5.
        // Inner points (1 and 10): a = 1, b = (9 + 10)/2 = 9.5.
        let points = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
        let labels = vec![0, 0, 1, 1];
        let expect = (9.5 / 10.5 + 8.5 / 9.5) / 2.0;
        assert!((silhouette(&points, &labels) - expect).abs() < 1e-12);
    }

    #[test]
    fn silhouette_is_poor_for_random_split() {
        // Splitting one tight cluster in half scores near zero or below.
        let points: Vec<Vec<f64>> = (0..10).map(|i| vec![(i % 3) as f64 * 0.01]).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        assert!(silhouette(&points, &labels) < 0.2);
    }

    #[test]
    fn single_cluster_scores_zero() {
        let points = vec![vec![0.0], vec![1.0]];
        assert_eq!(silhouette(&points, &[0, 0]), 0.0);
    }
}
