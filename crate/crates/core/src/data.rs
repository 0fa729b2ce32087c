//! Synthetic datasets, non-IID client partitioning, root-dataset
//! construction, and backdoor trigger embedding.
//!
//! Generation is seeded and pure: every operation derives its own random
//! stream from `(seed, operation tag)`, so concurrent calls and call-order
//! changes cannot perturb results.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng;

/// Feature rows with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(dim) = features.first().map(Vec::len) {
            if features.iter().any(|f| f.len() != dim) {
                return Err(Error::Config("feature rows have mixed dimensions".into()));
            }
        }
        if labels.iter().any(|&y| y >= classes) {
            return Err(Error::Config(format!("label out of range for {classes} classes")));
        }
        Ok(LabeledDataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map(Vec::len).unwrap_or(0)
    }

    /// Copy into an `nn::Batch` (errors when empty).
    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone())
    }

    /// Subset by row indices.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Write as CSV with header `d0..d{D-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let dim = self.feature_dim();
        for d in 0..dim {
            out.push_str(&format!("d{d},"));
        }
        out.push_str("label\n");
        for (row, label) in self.features.iter().zip(&self.labels) {
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{label}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Read a CSV written by [`LabeledDataset::write_csv`]. The class count
    /// is inferred as `max(label) + 1`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Usage(format!("{}: empty csv", path.display())))?;
        let dim = header.split(',').count() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != dim + 1 {
                return Err(Error::Usage(format!(
                    "{}: line {} has {} cells, expected {}",
                    path.display(),
                    ln + 2,
                    cells.len(),
                    dim + 1
                )));
            }
            let row: std::result::Result<Vec<f64>, _> =
                cells[..dim].iter().map(|c| c.parse::<f64>()).collect();
            let row = row.map_err(|e| {
                Error::Usage(format!("{}: line {}: {e}", path.display(), ln + 2))
            })?;
            let label: usize = cells[dim].parse().map_err(|e| {
                Error::Usage(format!("{}: line {}: {e}", path.display(), ln + 2))
            })?;
            features.push(row);
            labels.push(label);
        }
        let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
        LabeledDataset::new(features, labels, classes)
    }
}

/// Non-IID partition parameters. A sample of class `y` lands on a client of
/// group `y` (client `i` belongs to group `i mod C`) with probability
/// `bias`, and on a client of the other groups otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub bias: f64,
    pub seed: u64,
}

/// A small clean dataset held by the server, disjoint from train and test
/// sets by construction (caller contract on the pool).
#[derive(Debug, Clone)]
pub struct RootDataset {
    pub dataset: LabeledDataset,
    /// Fraction of samples drawn from `bias_class`.
    pub bias: f64,
    pub bias_class: usize,
}

/// Coordinates overwritten by a backdoor trigger, plus the attacker's
/// target label.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub indices: Vec<usize>,
    pub value: f64,
    pub target: usize,
}

impl TriggerSpec {
    pub fn new(indices: Vec<usize>, value: f64, target: usize) -> Result<Self> {
        let mut seen = indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != indices.len() {
            return Err(Error::Usage("trigger indices must be distinct".into()));
        }
        Ok(TriggerSpec {
            indices,
            value,
            target,
        })
    }
}

/// Generate `n` samples from `classes` Gaussian clusters with
/// unit-separated means and covariance `spread^2 * I`.
///
/// Class counts are exactly stratified (`n/classes` each, remainder to the
/// lowest class indices) and the rows are shuffled. When `features >=
/// classes` the means sit at `e_c / sqrt(2)`, so every pair of means is
/// exactly distance 1 apart; for smaller feature counts the means stack
/// along the coordinates at multiples of `1/sqrt(2)`.
pub fn gen_synthetic(
    classes: usize,
    features: usize,
    n: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes == 0 || features == 0 {
        return Err(Error::Usage("classes and features must be positive".into()));
    }
    if n < classes {
        return Err(Error::Usage(format!(
            "cannot stratify {n} samples over {classes} classes"
        )));
    }
    if spread <= 0.0 {
        return Err(Error::Usage("spread must be positive".into()));
    }
    let mut rng = rng::stream(seed, "data/gen");
    let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for c in 0..classes {
        let count = n / classes + usize::from(c < n % classes);
        let axis = c % features;
        let level = (c / features + 1) as f64;
        for _ in 0..count {
            let mut x: Vec<f64> = (0..features)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spread * z
                })
                .collect();
            x[axis] += level * inv_sqrt2;
            rows.push((x, c));
        }
    }
    // Fisher-Yates over the stratified rows.
    for i in (1..rows.len()).rev() {
        let j = rng.random_range(0..=i);
        rows.swap(i, j);
    }
    let (features_out, labels): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    LabeledDataset::new(features_out, labels, classes)
}

/// Split a dataset across clients with the grouped bias rule.
///
/// Clients are assigned to `C` groups round-robin. A sample of class `y`
/// goes to a uniformly chosen client of group `y` with probability
/// `spec.bias`, otherwise to a uniformly chosen client of the other groups.
/// The parts are disjoint and their union is the input dataset. If the
/// selected side has no clients the sample falls back to a uniform choice
/// over all clients.
pub fn partition_noniid(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<LabeledDataset>> {
    if spec.n_clients == 0 {
        return Err(Error::Usage("partition needs at least one client".into()));
    }
    if !(0.0..=1.0).contains(&spec.bias) {
        return Err(Error::Usage("partition bias must be in [0, 1]".into()));
    }
    if spec.n_clients < ds.classes {
        eprintln!(
            "warning: {} clients for {} classes leaves some groups empty",
            spec.n_clients, ds.classes
        );
    }
    let classes = ds.classes;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for client in 0..spec.n_clients {
        groups[client % classes].push(client);
    }
    let all: Vec<usize> = (0..spec.n_clients).collect();
    let mut rng = rng::stream(spec.seed, "data/partition");
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); spec.n_clients];
    for (i, &y) in ds.labels.iter().enumerate() {
        let own_group = &groups[y];
        let pick_own = rng.random_range(0.0..1.0) < spec.bias;
        let client = if pick_own {
            if own_group.is_empty() {
                all[rng.random_range(0..all.len())]
            } else {
                own_group[rng.random_range(0..own_group.len())]
            }
        } else {
            let others = spec.n_clients - own_group.len();
            if others == 0 {
                all[rng.random_range(0..all.len())]
            } else {
                // Index into the complement of own_group without materializing it.
                let mut k = rng.random_range(0..others);
                let mut chosen = 0;
                for client in 0..spec.n_clients {
                    if client % classes == y {
                        continue;
                    }
                    if k == 0 {
                        chosen = client;
                        break;
                    }
                    k -= 1;
                }
                chosen
            }
        };
        assignment[client].push(i);
    }
    Ok(assignment.iter().map(|idx| ds.select(idx)).collect())
}

/// Sample a root dataset of size `size` from `pool`, without replacement.
///
/// `ceil(bias * size)` samples come from `bias_class`; the remainder is
/// drawn uniformly from the rest of the pool.
pub fn build_root(
    pool: &LabeledDataset,
    size: usize,
    bias: f64,
    bias_class: usize,
    seed: u64,
) -> Result<RootDataset> {
    if !(0.0..=1.0).contains(&bias) {
        return Err(Error::Usage("root bias must be in [0, 1]".into()));
    }
    if bias_class >= pool.classes {
        return Err(Error::Usage(format!(
            "root bias class {bias_class} out of range for {} classes",
            pool.classes
        )));
    }
    if pool.len() < size {
        return Err(Error::Usage(format!(
            "root pool has {} samples, need {size}",
            pool.len()
        )));
    }
    let mut rng = rng::stream(seed, "data/root");
    let biased_count = (bias * size as f64).ceil() as usize;
    let class_rows: Vec<usize> = (0..pool.len())
        .filter(|&i| pool.labels[i] == bias_class)
        .collect();
    if class_rows.len() < biased_count {
        return Err(Error::Usage(format!(
            "root pool has {} samples of class {bias_class}, need {biased_count}",
            class_rows.len()
        )));
    }
    let mut chosen: Vec<usize> = index::sample(&mut rng, class_rows.len(), biased_count)
        .iter()
        .map(|k| class_rows[k])
        .collect();
    let taken: std::collections::HashSet<usize> = chosen.iter().copied().collect();
    let rest: Vec<usize> = (0..pool.len()).filter(|i| !taken.contains(i)).collect();
    let remainder = size - biased_count;
    if rest.len() < remainder {
        return Err(Error::Usage(format!(
            "root pool exhausted: {} remaining, need {remainder}",
            rest.len()
        )));
    }
    chosen.extend(
        index::sample(&mut rng, rest.len(), remainder)
            .iter()
            .map(|k| rest[k]),
    );
    Ok(RootDataset {
        dataset: pool.select(&chosen),
        bias,
        bias_class,
    })
}

/// Overwrite trigger coordinates and labels on the first
/// `ceil(fraction * N)` samples, returning a new dataset.
pub fn embed_trigger(
    ds: &LabeledDataset,
    trig: &TriggerSpec,
    fraction: f64,
) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Usage("trigger fraction must be in [0, 1]".into()));
    }
    if trig.target >= ds.classes {
        return Err(Error::Usage(format!(
            "trigger target {} out of range for {} classes",
            trig.target, ds.classes
        )));
    }
    if !ds.is_empty() {
        let dim = ds.feature_dim();
        if trig.indices.iter().any(|&i| i >= dim) {
            return Err(Error::Usage(format!(
                "trigger index out of range for {dim} features"
            )));
        }
    }
    let count = (fraction * ds.len() as f64).ceil() as usize;
    let mut out = ds.clone();
    for row in 0..count.min(out.len()) {
        for &i in &trig.indices {
            out.features[row][i] = trig.value;
        }
        out.labels[row] = trig.target;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tight_clusters_are_nearest_centroid_separable() {
        let train = gen_synthetic(2, 4, 200, 0.01, 5).unwrap();
        let held_out = gen_synthetic(2, 4, 200, 0.01, 6).unwrap();
        // Nearest-centroid oracle fit on train, scored on held-out data.
        let mut centroids = vec![vec![0.0; 4]; 2];
        let mut counts = [0usize; 2];
        for (x, &y) in train.features.iter().zip(&train.labels) {
            counts[y] += 1;
            for (c, v) in centroids[y].iter_mut().zip(x) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut correct = 0;
        for (x, &y) in held_out.features.iter().zip(&held_out.labels) {
            let d: Vec<f64> = centroids
                .iter()
                .map(|c| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            if d[y] < d[1 - y] {
                correct += 1;
            }
        }
        assert!(correct as f64 / held_out.len() as f64 >= 0.99);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(3, 5, 90, 0.3, 7).unwrap();
        let b = gen_synthetic(3, 5, 90, 0.3, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stratification_is_exact() {
        let ds = gen_synthetic(3, 8, 300, 0.2, 1).unwrap();
        let mut counts = [0usize; 3];
        for &y in &ds.labels {
            counts[y] += 1;
        }
        assert_eq!(counts, [100, 100, 100]);
    }

    #[test]
    fn full_bias_with_one_client_per_group() {
        let ds = gen_synthetic(3, 4, 120, 0.2, 2).unwrap();
        let parts = partition_noniid(
            &ds,
            &PartitionSpec {
                n_clients: 3,
                bias: 1.0,
                seed: 9,
            },
        )
        .unwrap();
        for (g, part) in parts.iter().enumerate() {
            assert!(part.labels.iter().all(|&y| y == g));
            assert_eq!(part.len(), 40);
        }
    }

    #[test]
    fn uniform_bias_gives_uniform_class_mix() {
        // With bias = 1/C and equal group sizes, each client sees a uniform
        // class distribution; chi-square over pooled counts at alpha=0.01
        // (df = 2, critical value 9.210).
        let classes = 3;
        let n_clients = 6;
        let mut counts = vec![vec![0usize; classes]; n_clients];
        for seed in 0..20u64 {
            let ds = gen_synthetic(classes, 4, 600, 0.3, seed).unwrap();
            let parts = partition_noniid(
                &ds,
                &PartitionSpec {
                    n_clients,
                    bias: 1.0 / classes as f64,
                    seed,
                },
            )
            .unwrap();
            for (client, part) in parts.iter().enumerate() {
                for &y in &part.labels {
                    counts[client][y] += 1;
                }
            }
        }
        for (client, row) in counts.iter().enumerate() {
            let total: usize = row.iter().sum();
            let expected = total as f64 / classes as f64;
            let chi2: f64 = row
                .iter()
                .map(|&o| (o as f64 - expected).powi(2) / expected)
                .sum();
            assert!(chi2 < 9.210, "client {client}: chi2 {chi2} counts {row:?}");
        }
    }

    #[test]
    fn biased_root_is_all_one_class() {
        let pool = gen_synthetic(3, 4, 400, 0.3, 3).unwrap();
        let root = build_root(&pool, 50, 1.0, 2, 4).unwrap();
        assert_eq!(root.dataset.len(), 50);
        assert!(root.dataset.labels.iter().all(|&y| y == 2));
    }

    #[test]
    fn unbiased_root_is_plain_sample() {
        let pool = gen_synthetic(3, 4, 400, 0.3, 3).unwrap();
        let root = build_root(&pool, 100, 0.0, 0, 4).unwrap();
        assert_eq!(root.dataset.len(), 100);
        // Every root row exists in the pool.
        for x in &root.dataset.features {
            assert!(pool.features.iter().any(|p| p == x));
        }
    }

    #[test]
    fn insufficient_pool_is_usage_error() {
        let pool = gen_synthetic(2, 3, 20, 0.3, 3).unwrap();
        assert!(matches!(
            build_root(&pool, 30, 0.0, 0, 1),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn trigger_fraction_edge_cases() {
        let ds = gen_synthetic(3, 5, 60, 0.3, 8).unwrap();
        let trig = TriggerSpec::new(vec![0, 1], 4.0, 0).unwrap();

        let untouched = embed_trigger(&ds, &trig, 0.0).unwrap();
        assert_eq!(untouched, ds);

        let all = embed_trigger(&ds, &trig, 1.0).unwrap();
        assert!(all.labels.iter().all(|&y| y == 0));
        assert!(all.features.iter().all(|x| x[0] == 4.0 && x[1] == 4.0));

        let twice = embed_trigger(&all, &trig, 1.0).unwrap();
        assert_eq!(twice, all);
    }

    #[test]
    fn trigger_touches_exactly_selected_coordinates() {
        let ds = gen_synthetic(2, 6, 40, 0.3, 11).unwrap();
        let trig = TriggerSpec::new(vec![2, 4], -7.0, 1).unwrap();
        let out = embed_trigger(&ds, &trig, 0.5).unwrap();
        let cut = (0.5 * ds.len() as f64).ceil() as usize;
        for (i, (orig, new)) in ds.features.iter().zip(&out.features).enumerate() {
            for d in 0..6 {
                if i < cut && (d == 2 || d == 4) {
                    assert_eq!(new[d], -7.0);
                } else {
                    assert_eq!(new[d], orig[d]);
                }
            }
            if i < cut {
                assert_eq!(out.labels[i], 1);
            } else {
                assert_eq!(out.labels[i], ds.labels[i]);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join("skymask-data-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.csv");
        let ds = gen_synthetic(3, 4, 30, 0.2, 12).unwrap();
        ds.write_csv(&path).unwrap();
        let back = LabeledDataset::read_csv(&path).unwrap();
        assert_eq!(ds, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #[test]
        fn partition_is_complete_and_disjoint(
            n_clients in 1usize..8,
            bias in 0.0f64..=1.0,
            seed in 0u64..500,
        ) {
            let ds = gen_synthetic(3, 4, 60, 0.3, seed).unwrap();
            let parts = partition_noniid(&ds, &PartitionSpec { n_clients, bias, seed }).unwrap();
            prop_assert_eq!(parts.len(), n_clients);
            let total: usize = parts.iter().map(LabeledDataset::len).sum();
            prop_assert_eq!(total, ds.len());
            // Every original row appears exactly once across the parts.
            let mut seen = vec![0usize; ds.len()];
            for part in &parts {
                for x in &part.features {
                    let pos = ds.features.iter().position(|p| p == x).unwrap();
                    seen[pos] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
