//! One federated communication round: distribute the global model, run
//! local training per client, let the active attack rewrite malicious
//! updates, and apply the configured aggregation rule.
//!
//! Clients run sequentially in client-id order, so a `(seed, round)` pair
//! fully determines every update regardless of scheduling.

use crate::attacks::{self, AttackKind, AttackPlan};
use crate::data::{self, LabeledDataset, RootDataset};
use crate::defenses::{self, DefenseKind, DefensePlan};
use crate::error::{Error, Result};
use crate::nn::{self, Batch, ParamVector};
use crate::rng;
use crate::skymask::{self, DetectionReport};

/// Per-round training parameters shared by all clients.
#[derive(Debug, Clone, PartialEq)]
pub struct FlParams {
    /// Local SGD iterations per round (`l`).
    pub local_iters: usize,
    /// Local learning rate (`beta`).
    pub client_lr: f64,
    /// Global learning rate applied to the aggregated update (`alpha`).
    pub global_lr: f64,
    pub batch_size: usize,
}

/// What one client sends back: its post-training weights, the update
/// `delta = W_t - W_i`, and its local dataset size.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub weights: ParamVector,
    pub delta: ParamVector,
    pub dataset_size: usize,
}

impl ClientUpdate {
    /// Build from post-training weights, deriving the delta from the global
    /// model so the `delta = global - weights` invariant holds by
    /// construction.
    pub fn from_weights(
        client_id: usize,
        global: &ParamVector,
        weights: ParamVector,
        dataset_size: usize,
    ) -> Result<Self> {
        let delta = global.sub(&weights)?;
        Ok(ClientUpdate {
            client_id,
            weights,
            delta,
            dataset_size,
        })
    }

    /// Build from a crafted update delta, deriving consistent weights.
    pub fn from_delta(
        client_id: usize,
        global: &ParamVector,
        delta: ParamVector,
        dataset_size: usize,
    ) -> Result<Self> {
        let weights = global.sub(&delta)?;
        Ok(ClientUpdate {
            client_id,
            weights,
            delta,
            dataset_size,
        })
    }
}

/// State after a completed round: the new global model, the updates
/// collected while producing it, and the simulator-only ground truth.
#[derive(Debug, Clone)]
pub struct RoundState {
    /// Index of the next round to run.
    pub round: usize,
    pub global: ParamVector,
    pub updates: Vec<ClientUpdate>,
    /// `true` for clients controlled by the attacker.
    pub malicious_truth: Vec<bool>,
}

impl RoundState {
    /// Round-zero state: the `n_malicious` lowest-id clients are flagged.
    pub fn initial(global: ParamVector, n_clients: usize, n_malicious: usize) -> Self {
        let malicious_truth = (0..n_clients).map(|i| i < n_malicious).collect();
        RoundState {
            round: 0,
            global,
            updates: Vec::new(),
            malicious_truth,
        }
    }
}

/// Draw a mini-batch; `batch_size >= len` falls back to the full dataset in
/// its stored order.
fn minibatch(
    data: &LabeledDataset,
    batch_size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Batch> {
    if batch_size >= data.len() {
        return data.to_batch();
    }
    let picked = rand::seq::index::sample(rng, data.len(), batch_size).into_vec();
    data.select(&picked).to_batch()
}

/// Honest local training: `local_iters` mini-batch SGD steps from the
/// global model.
pub fn local_train(
    global: &ParamVector,
    data: &LabeledDataset,
    local_iters: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    client_id: usize,
) -> Result<ClientUpdate> {
    if data.is_empty() {
        return Err(Error::Usage(format!(
            "client {client_id} has an empty local dataset"
        )));
    }
    if local_iters == 0 {
        return Err(Error::Usage("local training needs at least one iteration".into()));
    }
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let mut rng = rng::stream(seed, "fl/local");
    let mut weights = global.clone();
    for _ in 0..local_iters {
        let batch = minibatch(data, batch_size, &mut rng)?;
        let (_, grad) = nn::loss_and_grad(&weights, &batch)?;
        weights = nn::sgd_step(&weights, &grad, lr)?;
    }
    ClientUpdate::from_weights(client_id, global, weights, data.len())
}

/// Dataset-size-weighted mean of the deltas of `subset` (all updates when
/// `subset` is `None`). The weights sum to 1 before any scaling.
pub(crate) fn weighted_delta(
    updates: &[ClientUpdate],
    subset: Option<&[usize]>,
) -> Result<ParamVector> {
    let ids: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..updates.len()).collect(),
    };
    let first = updates
        .first()
        .ok_or_else(|| Error::Usage("aggregation needs at least one update".into()))?;
    let total: usize = ids.iter().map(|&i| updates[i].dataset_size).sum();
    if total == 0 {
        return Err(Error::Usage("all aggregated clients have zero dataset size".into()));
    }
    let mut acc = ParamVector::zeros(first.delta.layout().clone());
    for &i in &ids {
        let w = updates[i].dataset_size as f64 / total as f64;
        if w > 0.0 {
            acc = acc.add_scaled(&updates[i].delta, w)?;
        }
    }
    Ok(acc)
}

/// FedAvg: `W_{t+1} = W_t - alpha * sum_i (|D_i| / sum_j |D_j|) * delta_i`.
pub fn fedavg(
    global: &ParamVector,
    updates: &[ClientUpdate],
    global_lr: f64,
) -> Result<ParamVector> {
    let delta = weighted_delta(updates, None)?;
    global.add_scaled(&delta, -global_lr)
}

/// Execute one communication round.
///
/// All clients first train honestly on their (possibly attacker-poisoned)
/// local data; update-crafting attacks then replace the flagged clients'
/// updates with full knowledge of the honest population. Benign updates
/// pass through bit-identical. Detecting defenses also return a
/// [`DetectionReport`].
pub fn run_round(
    prev: &RoundState,
    clients: &[LabeledDataset],
    root: &RootDataset,
    attack: &AttackPlan,
    defense: &DefensePlan,
    fl: &FlParams,
    seed: u64,
) -> Result<(RoundState, Option<DetectionReport>)> {
    let n = clients.len();
    if prev.malicious_truth.len() != n {
        return Err(Error::Config(format!(
            "{} ground-truth flags for {n} clients",
            prev.malicious_truth.len()
        )));
    }
    let t = prev.round;
    let global = &prev.global;
    let malicious: Vec<usize> = (0..n).filter(|&i| prev.malicious_truth[i]).collect();

    // Per-client sub-triggers for the distributed backdoor; the plain
    // scaling attack embeds the full trigger everywhere.
    let sub_triggers = if attack.kind == AttackKind::Dba && !malicious.is_empty() {
        Some(attacks::dba_assign(&attack.trigger, malicious.len())?)
    } else {
        None
    };

    let mut updates = Vec::with_capacity(n);
    for (i, data) in clients.iter().enumerate() {
        let is_malicious = prev.malicious_truth[i];
        let train_seed = rng::derive(seed, &format!("round{t}/client{i}"));
        let update = if is_malicious && attack.kind == AttackKind::LabelFlip {
            let flipped = attacks::label_flip(data);
            local_train(
                global,
                &flipped,
                fl.local_iters,
                fl.client_lr,
                fl.batch_size,
                train_seed,
                i,
            )?
        } else if is_malicious
            && (attack.kind == AttackKind::Scaling || attack.kind == AttackKind::Dba)
        {
            let trig = match &sub_triggers {
                Some(subs) => {
                    let rank = malicious.iter().position(|&m| m == i).unwrap();
                    &subs[rank]
                }
                None => &attack.trigger,
            };
            let poisoned = data::embed_trigger(data, trig, attack.poison_fraction)?;
            let honest = local_train(
                global,
                &poisoned,
                fl.local_iters,
                fl.client_lr,
                fl.batch_size,
                train_seed,
                i,
            )?;
            ClientUpdate::from_delta(
                i,
                global,
                honest.delta.scale(attack.scale),
                honest.dataset_size,
            )?
        } else {
            local_train(
                global,
                data,
                fl.local_iters,
                fl.client_lr,
                fl.batch_size,
                train_seed,
                i,
            )?
        };
        updates.push(update);
    }

    // Update-crafting attacks observe the whole honest population.
    let crafts_updates = matches!(
        attack.kind,
        AttackKind::FangTrim | AttackKind::FangKrum | AttackKind::MinMax | AttackKind::MinSum
    );
    if crafts_updates && !malicious.is_empty() {
        let honest_deltas: Vec<ParamVector> = updates.iter().map(|u| u.delta.clone()).collect();
        let ctx = attacks::AttackContext {
            honest_deltas: &honest_deltas,
            malicious: &malicious,
            global,
            round: t,
        };
        let mut rng = rng::stream(seed, &format!("round{t}/attack"));
        let crafted = match attack.kind {
            AttackKind::FangTrim => attacks::fang_trim(&ctx, &mut rng)?,
            AttackKind::FangKrum => attacks::fang_krum(
                &ctx,
                defense.assumed_malicious,
                attack.lambda_init,
                attack.halving_steps,
                &mut rng,
            )?,
            AttackKind::MinMax => attacks::agr_agnostic(
                &ctx,
                attacks::AgrMode::MinMax,
                attack.direction,
                attack.gamma_init,
                attack.gamma_tol,
            )?,
            AttackKind::MinSum => attacks::agr_agnostic(
                &ctx,
                attacks::AgrMode::MinSum,
                attack.direction,
                attack.gamma_init,
                attack.gamma_tol,
            )?,
            _ => unreachable!(),
        };
        for (rank, &client) in malicious.iter().enumerate() {
            let size = updates[client].dataset_size;
            updates[client] =
                ClientUpdate::from_delta(client, global, crafted[rank].clone(), size)?;
        }
    }

    // Aggregation, with detection where the defense provides it.
    let detect_seed = rng::derive(seed, &format!("round{t}/detect"));
    let (new_global, report) = match defense.kind {
        DefenseKind::FedAvg => (fedavg(global, &updates, fl.global_lr)?, None),
        DefenseKind::Krum => {
            let selected = defenses::krum(&updates, defense.assumed_malicious)?;
            (global.add_scaled(&selected.delta, -fl.global_lr)?, None)
        }
        DefenseKind::TrimmedMean => {
            let delta = defenses::trimmed_mean(&updates, defense.assumed_malicious)?;
            (global.add_scaled(&delta, -fl.global_lr)?, None)
        }
        DefenseKind::FlTrust => {
            let delta = defenses::fltrust(
                global,
                &updates,
                root,
                fl,
                rng::derive(seed, &format!("round{t}/fltrust")),
            )?;
            (global.add_scaled(&delta, -fl.global_lr)?, None)
        }
        DefenseKind::Tolpegin => {
            let report = defenses::tolpegin_detect(
                &updates,
                defense.mask.pca_dims,
                defense.mask.gmm_restarts,
                detect_seed,
                &prev.malicious_truth,
            )?;
            let global_next =
                skymask::aggregate_benign(global, &updates, &report.benign, fl.global_lr)?;
            (global_next, Some(report))
        }
        DefenseKind::Skymask | DefenseKind::SkymaskNr => {
            let variant = if defense.kind == DefenseKind::Skymask {
                skymask::Variant::WithRoot
            } else {
                skymask::Variant::NoRoot
            };
            let weights: Vec<ParamVector> = updates.iter().map(|u| u.weights.clone()).collect();
            let report = skymask::detect(
                &weights,
                global,
                root,
                variant,
                &defense.mask,
                fl,
                &prev.malicious_truth,
                rng::derive(seed, &format!("round{t}/rootmodel")),
                detect_seed,
            )?;
            let global_next =
                skymask::aggregate_benign(global, &updates, &report.benign, fl.global_lr)?;
            (global_next, Some(report))
        }
    };

    Ok((
        RoundState {
            round: t + 1,
            global: new_global,
            updates,
            malicious_truth: prev.malicious_truth.clone(),
        },
        report,
    ))
}
