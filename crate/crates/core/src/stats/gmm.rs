//! Gaussian mixture fitting with diagonal covariances.
//!
//! EM with k-means++-style seeding per restart; restarts compete on the
//! silhouette of their hard assignments (see [`gmm_fit`]). Variances are
//! floored at 1e-6 so the E-step can never divide by zero, and the
//! constrained M-step keeps the classic EM guarantee that the
//! log-likelihood trace is non-decreasing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

const VARIANCE_FLOOR: f64 = 1e-6;
const CONVERGENCE_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 500;

/// A fitted diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GmmModel {
    /// Mixing weights, summing to 1.
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Per-component diagonal variances, floored at 1e-6.
    pub variances: Vec<Vec<f64>>,
    /// Total log-likelihood of the data under the fitted model.
    pub log_likelihood: f64,
    /// Per-point responsibilities, rows summing to 1.
    pub responsibilities: Vec<Vec<f64>>,
    /// Log-likelihood recorded at every EM iteration.
    pub trace: Vec<f64>,
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Hard assignment of each point (argmax responsibility, ties to the
    /// lower component index).
    pub fn assignments(&self) -> Vec<usize> {
        self.responsibilities
            .iter()
            .map(|row| {
                let mut best = 0;
                for (k, &r) in row.iter().enumerate().skip(1) {
                    if r > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_components()];
        for a in self.assignments() {
            sizes[a] += 1;
        }
        sizes
    }
}

fn log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((xv, m), v) in x.iter().zip(mean).zip(var) {
        let diff = xv - m;
        acc += -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + diff * diff / v);
    }
    acc
}

fn kmeans_pp_means(y: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = y.len();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    means.push(y[rng.random_range(0..n)].clone());
    while means.len() < k {
        let d2: Vec<f64> = y
            .iter()
            .map(|x| {
                means
                    .iter()
                    .map(|m| x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let r = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if r < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        means.push(y[idx].clone());
    }
    means
}

fn em_single(y: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> GmmModel {
    let n = y.len();
    let dim = y[0].len();

    // k-means++-style seeding: pick means, hard-assign every point to its
    // nearest seed, and derive the initial weights, means, and variances
    // from that assignment. A seed that lands on a tight clump starts with
    // a tight variance, which is what lets EM lock onto small clusters.
    let seeds = kmeans_pp_means(y, k, rng);
    let assign: Vec<usize> = y
        .iter()
        .map(|x| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, s) in seeds.iter().enumerate() {
                let d: f64 = x.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect();
    let mut weights = vec![0.0; k];
    let mut means = vec![vec![0.0; dim]; k];
    let mut variances = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &c) in y.iter().zip(&assign) {
        counts[c] += 1;
        for (m, v) in means[c].iter_mut().zip(x) {
            *m += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            means[c] = seeds[c].clone();
            continue;
        }
        for m in &mut means[c] {
            *m /= counts[c] as f64;
        }
    }
    for (x, &c) in y.iter().zip(&assign) {
        for ((vv, m), v) in variances[c].iter_mut().zip(&means[c]).zip(x) {
            *vv += (v - m) * (v - m);
        }
    }
    for c in 0..k {
        weights[c] = counts[c] as f64 / n as f64;
        for vv in &mut variances[c] {
            *vv = (*vv / counts[c].max(1) as f64).max(VARIANCE_FLOOR);
        }
    }

    let mut responsibilities = vec![vec![0.0; k]; n];
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;

    for _iter in 0..MAX_ITERS {
        // E step.
        let mut ll = 0.0;
        for (i, x) in y.iter().enumerate() {
            let logs: Vec<f64> = (0..k)
                .map(|c| {
                    if weights[c] <= 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        weights[c].ln() + log_density(x, &means[c], &variances[c])
                    }
                })
                .collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            ll += lse;
            for (c, l) in logs.iter().enumerate() {
                responsibilities[i][c] = (l - lse).exp();
            }
        }
        trace.push(ll);
        debug_assert!(
            ll + 1e-7 * (1.0 + prev_ll.abs()) >= prev_ll,
            "EM log-likelihood decreased: {prev_ll} -> {ll}"
        );
        if (ll - prev_ll).abs() < CONVERGENCE_TOL {
            prev_ll = ll;
            break;
        }
        prev_ll = ll;

        // M step.
        for c in 0..k {
            let mass: f64 = responsibilities.iter().map(|r| r[c]).sum();
            if mass < 1e-10 {
                // Dead component: freeze parameters, zero weight.
                weights[c] = 0.0;
                continue;
            }
            weights[c] = mass / n as f64;
            let mut mean = vec![0.0; dim];
            for (x, r) in y.iter().zip(&responsibilities) {
                for (m, v) in mean.iter_mut().zip(x) {
                    *m += r[c] * v;
                }
            }
            for m in &mut mean {
                *m /= mass;
            }
            let mut var = vec![0.0; dim];
            for (x, r) in y.iter().zip(&responsibilities) {
                for ((vv, m), v) in var.iter_mut().zip(&mean).zip(x) {
                    *vv += r[c] * (v - m) * (v - m);
                }
            }
            for vv in &mut var {
                *vv = (*vv / mass).max(VARIANCE_FLOOR);
            }
            means[c] = mean;
            variances[c] = var;
        }
    }

    GmmModel {
        weights,
        means,
        variances,
        log_likelihood: prev_ll,
        responsibilities,
        trace,
    }
}

/// Per-dimension variance of the data, floored.
fn data_variance(y: &[Vec<f64>]) -> Vec<f64> {
    let n = y.len() as f64;
    let dim = y[0].len();
    let mut mean = vec![0.0; dim];
    for x in y {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for x in y {
        for ((dv, m), v) in var.iter_mut().zip(&mean).zip(x) {
            *dv += (v - m) * (v - m) / n;
        }
    }
    for dv in &mut var {
        *dv = dv.max(VARIANCE_FLOOR);
    }
    var
}

/// Fit a k-component mixture, keeping the best of `restarts` seeded runs.
///
/// Restart ranking is the delicate part. Raw likelihood is unusable:
/// duplicate rows make MLE density spikes of unbounded likelihood, so EM
/// would always prefer a component collapsed onto a handful of identical
/// points over a genuinely separated split. Restarts therefore compete on
/// the silhouette of their hard assignments (separation relative to
/// spread), with the variance-smoothed likelihood breaking ties and
/// ranking single-component
/// fits. The returned model's parameters and `log_likelihood` are the
/// unmodified MLE values of the winning restart.
pub fn gmm_fit(y: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<GmmModel> {
    if y.is_empty() || y.len() < k {
        return Err(Error::Usage(format!(
            "gmm needs at least k={k} points, got {}",
            y.len()
        )));
    }
    if k == 0 {
        return Err(Error::Usage("gmm needs at least one component".into()));
    }
    if restarts == 0 {
        return Err(Error::Usage("gmm needs at least one restart".into()));
    }
    let dim = y[0].len();
    if dim == 0 || y.iter().any(|row| row.len() != dim) {
        return Err(Error::Config("gmm input rows have mixed dimensions".into()));
    }

    let data_var = data_variance(y);
    let mut best: Option<(GmmModel, f64, f64)> = None;
    for r in 0..restarts {
        let mut rng = rng::stream(seed, &format!("gmm/restart{r}"));
        let model = em_single(y, k, &mut rng);
        let sil = if k >= 2 {
            crate::stats::silhouette(y, &model.assignments())
        } else {
            0.0
        };
        let ll = smoothed_log_likelihood(y, &model, &data_var);
        let better = match &best {
            None => true,
            Some((_, best_sil, best_ll)) => {
                sil > *best_sil + 1e-12 || ((sil - best_sil).abs() <= 1e-12 && ll > *best_ll)
            }
        };
        if better {
            best = Some((model, sil, ll));
        }
    }
    Ok(best.unwrap().0)
}

/// Number of free parameters of a k-component diagonal mixture in d dims.
fn free_params(k: usize, dim: usize) -> usize {
    k * 2 * dim + (k - 1)
}

/// Fraction of the per-dimension data variance added to component
/// variances when scoring candidates for model selection. MLE mixtures
/// have unbounded likelihood at collapsed components, so raw BIC would
/// happily pick a 2-component fit whose second component is a 2-3 point
/// sliver with near-zero variance; smoothing caps that spurious gain
/// without touching the fitted model itself.
const SELECTION_SMOOTHING: f64 = 5e-2;

fn smoothed_log_likelihood(y: &[Vec<f64>], model: &GmmModel, data_var: &[f64]) -> f64 {
    let smoothed: Vec<Vec<f64>> = model
        .variances
        .iter()
        .map(|var| {
            var.iter()
                .zip(data_var)
                .map(|(v, dv)| v + SELECTION_SMOOTHING * dv)
                .collect()
        })
        .collect();
    let mut ll = 0.0;
    for x in y {
        let logs: Vec<f64> = (0..model.n_components())
            .map(|c| {
                if model.weights[c] <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    model.weights[c].ln() + log_density(x, &model.means[c], &smoothed[c])
                }
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ll += max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    }
    ll
}

/// Fit K in {1, 2} and keep the model minimizing BIC.
///
/// A 2-component candidate is only considered when there are at least two
/// points per component on average (n >= 4); below that every component is
/// a floored singleton and the likelihood carries no information. The BIC
/// score uses the variance-smoothed likelihood; the returned model is the
/// plain MLE fit.
pub fn select_k_bic(y: &[Vec<f64>], restarts: usize, seed: u64) -> Result<(GmmModel, usize)> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Usage("bic selection needs data".into()));
    }
    let dim = y.first().map(Vec::len).unwrap_or(0);
    let data_var = data_variance(y);

    let mut best: Option<(GmmModel, usize, f64)> = None;
    for k in [1usize, 2] {
        if k > n || (k > 1 && n < 2 * k) {
            continue;
        }
        let model = gmm_fit(y, k, restarts, rng::derive(seed, &format!("bic/k{k}")))?;
        let ll = smoothed_log_likelihood(y, &model, &data_var);
        let bic = -2.0 * ll + free_params(k, dim) as f64 * (n as f64).ln();
        if best.as_ref().map(|&(_, _, b)| bic < b).unwrap_or(true) {
            best = Some((model, k, bic));
        }
    }
    let (model, k, _) = best.unwrap();
    Ok((model, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn two_blobs(n_a: usize, n_b: usize, separation: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng::stream(seed, "test/blobs");
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n_a {
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            pts.push(vec![x, y]);
            labels.push(0);
        }
        for _ in 0..n_b {
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            pts.push(vec![x + separation, y]);
            labels.push(1);
        }
        (pts, labels)
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (pts, truth) = two_blobs(30, 30, 10.0, 1);
        let model = gmm_fit(&pts, 2, 4, 2).unwrap();
        let assign = model.assignments();
        // Cluster indices are arbitrary; check consistency with the truth.
        let flips: usize = truth
            .iter()
            .zip(&assign)
            .filter(|(t, a)| *t != *a)
            .count();
        let agreement = flips.max(truth.len() - flips);
        assert_eq!(agreement, truth.len());
    }

    #[test]
    fn single_component_closed_form() {
        let (pts, _) = two_blobs(25, 0, 0.0, 3);
        let model = gmm_fit(&pts, 1, 1, 4).unwrap();
        let n = pts.len() as f64;
        for d in 0..2 {
            let mean: f64 = pts.iter().map(|p| p[d]).sum::<f64>() / n;
            let var: f64 = pts.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n;
            assert!((model.means[0][d] - mean).abs() < 1e-9);
            assert!((model.variances[0][d] - var).abs() < 1e-9);
        }
        assert!((model.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_is_monotone() {
        for seed in 0..10u64 {
            let (pts, _) = two_blobs(20, 10, 3.0, seed);
            let model = gmm_fit(&pts, 2, 2, seed).unwrap();
            for w in model.trace.windows(2) {
                assert!(
                    w[1] + 1e-9 * (1.0 + w[0].abs()) >= w[0],
                    "seed {seed}: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn responsibilities_are_distributions() {
        let (pts, _) = two_blobs(15, 15, 4.0, 7);
        let model = gmm_fit(&pts, 2, 3, 8).unwrap();
        for row in &model.responsibilities {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&r| r >= 0.0));
        }
        let wsum: f64 = model.weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bic_prefers_one_cluster_on_single_gaussian() {
        let mut wins = 0;
        for seed in 0..40u64 {
            let (pts, _) = two_blobs(40, 0, 0.0, seed);
            let (_, k) = select_k_bic(&pts, 4, seed).unwrap();
            if k == 1 {
                wins += 1;
            }
        }
        assert!(wins >= 38, "K=1 chosen only {wins}/40 times");
    }

    #[test]
    fn bic_prefers_two_clusters_on_separated_data() {
        let mut wins = 0;
        for seed in 0..40u64 {
            let (pts, _) = two_blobs(8, 2, 10.0, seed + 1000);
            let (_, k) = select_k_bic(&pts, 4, seed).unwrap();
            if k == 2 {
                wins += 1;
            }
        }
        assert!(wins >= 38, "K=2 chosen only {wins}/40 times");
    }

    #[test]
    fn two_points_select_one_cluster() {
        let pts = vec![vec![0.0, 0.0], vec![5.0, 5.0]];
        let (_, k) = select_k_bic(&pts, 4, 1).unwrap();
        assert_eq!(k, 1);
    }

    #[test]
    fn fit_is_deterministic() {
        let (pts, _) = two_blobs(12, 6, 5.0, 9);
        let a = gmm_fit(&pts, 2, 3, 10).unwrap();
        let b = gmm_fit(&pts, 2, 3, 10).unwrap();
        assert_eq!(a.log_likelihood, b.log_likelihood);
        assert_eq!(a.means, b.means);
    }
}
