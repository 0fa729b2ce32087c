//! Baseline robust aggregators and the PCA-clustering detector.
//!
//! - `krum`: selects the single update with the smallest sum of squared
//!   distances to its `n - n_m - 2` nearest peers.
//! - `trimmed_mean`: per coordinate, drop the `n_m` smallest and largest
//!   values and average the rest.
//! - `fltrust`: cosine-similarity trust scores against a server-trained
//!   root update, clipped at zero, with norms rescaled to the root's.
//! - `tolpegin_detect`: standardize updates, project with PCA, fit a
//!   2-component Gaussian mixture, flag the smaller cluster.

use serde::{Deserialize, Serialize};

use crate::data::RootDataset;
use crate::error::{Error, Result};
use crate::fl::{local_train, ClientUpdate, FlParams};
use crate::nn::ParamVector;
use crate::skymask::{DetectionReport, MaskHyper};
use crate::stats;

/// Which aggregation rule the server runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    FedAvg,
    Krum,
    TrimmedMean,
    FlTrust,
    Tolpegin,
    Skymask,
    SkymaskNr,
}

impl DefenseKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fedavg" => DefenseKind::FedAvg,
            "krum" => DefenseKind::Krum,
            "trimmed-mean" => DefenseKind::TrimmedMean,
            "fltrust" => DefenseKind::FlTrust,
            "tolpegin" => DefenseKind::Tolpegin,
            "skymask" => DefenseKind::Skymask,
            "skymask-nr" => DefenseKind::SkymaskNr,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DefenseKind::FedAvg => "fedavg",
            DefenseKind::Krum => "krum",
            DefenseKind::TrimmedMean => "trimmed-mean",
            DefenseKind::FlTrust => "fltrust",
            DefenseKind::Tolpegin => "tolpegin",
            DefenseKind::Skymask => "skymask",
            DefenseKind::SkymaskNr => "skymask-nr",
        }
    }
}

/// Runtime defense configuration for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DefensePlan {
    pub kind: DefenseKind,
    /// Number of malicious clients assumed by Krum/Trim (and handed to the
    /// Krum-targeted attack).
    pub assumed_malicious: usize,
    pub mask: MaskHyper,
}

/// Krum selection over raw update deltas; returns the winning index.
/// Ties go to the lowest index.
pub fn krum_select(deltas: &[ParamVector], assumed_malicious: usize) -> Result<usize> {
    let n = deltas.len();
    if n < assumed_malicious + 3 {
        return Err(Error::Usage(format!(
            "krum needs n >= n_m + 3 (n = {n}, n_m = {assumed_malicious})"
        )));
    }
    let keep = n - assumed_malicious - 2;
    let mut best = 0usize;
    let mut best_score = f64::INFINITY;
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let diff = deltas[i].sub(&deltas[j]).expect("layouts checked by caller");
                diff.dot(&diff)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let score: f64 = dists[..keep].iter().sum();
        if score < best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(best)
}

/// Krum over client updates; `n - n_m - 2` nearest neighbors define the
/// score and the single lowest-score update is returned (never a blend).
pub fn krum(updates: &[ClientUpdate], assumed_malicious: usize) -> Result<&ClientUpdate> {
    let deltas: Vec<ParamVector> = updates.iter().map(|u| u.delta.clone()).collect();
    let idx = krum_select(&deltas, assumed_malicious)?;
    Ok(&updates[idx])
}

/// Coordinate-wise trimmed mean of the update deltas.
pub fn trimmed_mean(updates: &[ClientUpdate], assumed_malicious: usize) -> Result<ParamVector> {
    let n = updates.len();
    if n <= 2 * assumed_malicious {
        return Err(Error::Usage(format!(
            "trimmed mean needs n > 2 * n_m (n = {n}, n_m = {assumed_malicious})"
        )));
    }
    let layout = updates[0].delta.layout().clone();
    let total = layout.total();
    let mut out = vec![0.0; total];
    let mut column = vec![0.0; n];
    for (k, slot) in out.iter_mut().enumerate() {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.delta.values()[k];
        }
        column.sort_by(|a, b| a.total_cmp(b));
        let kept = &column[assumed_malicious..n - assumed_malicious];
        *slot = kept.iter().sum::<f64>() / kept.len() as f64;
    }
    ParamVector::new(out, layout)
}

/// The pure FLTrust combination step, separated from root-model training so
/// it can be checked against hand arithmetic.
///
/// Each update gets trust score `max(0, cos(delta_i, root_delta))` and is
/// rescaled to the root update's norm; the output is the trust-weighted
/// average (zero when every score is zero).
pub fn fltrust_aggregate(deltas: &[ParamVector], root_delta: &ParamVector) -> Result<ParamVector> {
    if deltas.is_empty() {
        return Err(Error::Usage("fltrust needs at least one update".into()));
    }
    let root_norm = root_delta.norm();
    if root_norm == 0.0 {
        eprintln!("warning: root update is zero; fltrust aggregate is zero");
        return Ok(ParamVector::zeros(root_delta.layout().clone()));
    }
    let mut acc = ParamVector::zeros(root_delta.layout().clone());
    let mut score_sum = 0.0;
    for delta in deltas {
        let score = delta.cosine(root_delta).max(0.0);
        if score == 0.0 {
            continue;
        }
        let norm = delta.norm();
        acc = acc.add_scaled(delta, score * root_norm / norm)?;
        score_sum += score;
    }
    if score_sum == 0.0 {
        return Ok(ParamVector::zeros(root_delta.layout().clone()));
    }
    Ok(acc.scale(1.0 / score_sum))
}

/// FLTrust: train the root update with the same `(lr, iters)` the clients
/// use, then combine the client deltas with [`fltrust_aggregate`].
pub fn fltrust(
    global: &ParamVector,
    updates: &[ClientUpdate],
    root: &RootDataset,
    fl: &FlParams,
    seed: u64,
) -> Result<ParamVector> {
    let root_update = local_train(
        global,
        &root.dataset,
        fl.local_iters,
        fl.client_lr,
        fl.batch_size,
        seed,
        0,
    )?;
    let deltas: Vec<ParamVector> = updates.iter().map(|u| u.delta.clone()).collect();
    fltrust_aggregate(&deltas, &root_update.delta)
}

/// PCA + 2-component Gaussian mixture over standardized updates; the
/// smaller cluster is flagged malicious (ties go to the cluster with the
/// larger mean norm in PCA space).
pub fn tolpegin_detect(
    updates: &[ClientUpdate],
    k_pca: usize,
    gmm_restarts: usize,
    seed: u64,
    truth: &[bool],
) -> Result<DetectionReport> {
    let n = updates.len();
    if n < 2 {
        return Err(Error::Usage("tolpegin detection needs at least 2 clients".into()));
    }
    let total = updates[0].delta.len();

    // Standardize each coordinate across clients; zero-variance coordinates
    // carry no signal and are dropped.
    let mut kept_cols: Vec<Vec<f64>> = Vec::new();
    for k in 0..total {
        let col: Vec<f64> = updates.iter().map(|u| u.delta.values()[k]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if var <= 0.0 {
            continue;
        }
        let std = var.sqrt();
        kept_cols.push(col.iter().map(|v| (v - mean) / std).collect());
    }

    if kept_cols.is_empty() {
        // All updates identical: nothing to cluster, everyone is benign.
        let mut report = DetectionReport::from_verdicts(vec![false; n], truth, 1);
        report.projection = Some(vec![(0.0, 0.0); n]);
        return Ok(report);
    }

    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| kept_cols.iter().map(|col| col[i]).collect())
        .collect();
    let k_eff = k_pca.min(n).min(kept_cols.len()).max(1);
    let (_, projected) = stats::pca_fit_transform(&rows, k_eff)?;

    let gmm = stats::gmm_fit(&projected, 2.min(n), gmm_restarts, seed)?;
    let assign = gmm.assignments();
    let sizes = gmm.cluster_sizes();
    let verdicts: Vec<bool> = if gmm.n_components() < 2 || sizes.contains(&0) {
        vec![false; n]
    } else {
        let flagged = match sizes[0].cmp(&sizes[1]) {
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Greater => 1,
            std::cmp::Ordering::Equal => {
                // Tie rule: flag the cluster with the larger mean norm.
                let mean_norm = |c: usize| {
                    let members: Vec<&Vec<f64>> = projected
                        .iter()
                        .zip(&assign)
                        .filter(|(_, &a)| a == c)
                        .map(|(p, _)| p)
                        .collect();
                    members
                        .iter()
                        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
                        .sum::<f64>()
                        / members.len() as f64
                };
                if mean_norm(0) >= mean_norm(1) {
                    0
                } else {
                    1
                }
            }
        };
        assign.iter().map(|&a| a == flagged).collect()
    };

    let clusters = if verdicts.iter().any(|&v| v) { 2 } else { 1 };
    let mut report = DetectionReport::from_verdicts(verdicts, truth, clusters);
    report.projection = Some(
        projected
            .iter()
            .map(|row| {
                (
                    row.first().copied().unwrap_or(0.0),
                    row.get(1).copied().unwrap_or(0.0),
                )
            })
            .collect(),
    );
    Ok(report)
}
