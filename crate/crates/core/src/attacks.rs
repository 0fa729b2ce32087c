//! Model-poisoning attack strategies.
//!
//! All attacks run under the strongest threat model: the attacker fully
//! controls the flagged clients and observes every client's honest update
//! before crafting replacements. Data-level attacks (label flipping,
//! backdoor triggers) poison local datasets before honest training;
//! update-crafting attacks replace the trained updates outright.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledDataset, TriggerSpec};
use crate::defenses::krum_select;
use crate::error::{Error, Result};
use crate::fl::{local_train, ClientUpdate};
use crate::nn::{mean_vector, ParamVector};

/// The attack strategy applied to malicious clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    LabelFlip,
    FangTrim,
    FangKrum,
    MinMax,
    MinSum,
    Scaling,
    Dba,
}

impl AttackKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => AttackKind::None,
            "label-flip" => AttackKind::LabelFlip,
            "fang-trim" => AttackKind::FangTrim,
            "fang-krum" => AttackKind::FangKrum,
            "min-max" => AttackKind::MinMax,
            "min-sum" => AttackKind::MinSum,
            "scaling" => AttackKind::Scaling,
            "dba" => AttackKind::Dba,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::LabelFlip => "label-flip",
            AttackKind::FangTrim => "fang-trim",
            AttackKind::FangKrum => "fang-krum",
            AttackKind::MinMax => "min-max",
            AttackKind::MinSum => "min-sum",
            AttackKind::Scaling => "scaling",
            AttackKind::Dba => "dba",
        }
    }

    /// True for the backdoor attacks whose success rate is measured on
    /// trigger-embedded test data.
    pub fn is_targeted(&self) -> bool {
        matches!(self, AttackKind::Scaling | AttackKind::Dba)
    }
}

/// Direction of the crafted perturbation in the AGR-agnostic attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbDirection {
    /// Negative coordinate-wise standard deviation of the honest updates.
    InverseStd,
    /// Negative mean direction, normalized to unit length.
    InverseUnit,
    /// Negative coordinate-wise sign of the mean.
    InverseSign,
}

impl PerturbDirection {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "inverse-std" => PerturbDirection::InverseStd,
            "inverse-unit" => PerturbDirection::InverseUnit,
            "inverse-sign" => PerturbDirection::InverseSign,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbDirection::InverseStd => "inverse-std",
            PerturbDirection::InverseUnit => "inverse-unit",
            PerturbDirection::InverseSign => "inverse-sign",
        }
    }
}

/// Feasibility objective of the AGR-agnostic attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgrMode {
    /// Max distance to any honest update bounded by the max honest
    /// pairwise distance.
    MinMax,
    /// Sum of squared distances bounded by the worst honest client's sum.
    MinSum,
}

/// Runtime attack configuration for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackPlan {
    pub kind: AttackKind,
    /// Update scale for the backdoor attacks.
    pub scale: f64,
    /// Fraction of a malicious client's local data that gets the trigger.
    pub poison_fraction: f64,
    pub trigger: TriggerSpec,
    pub direction: PerturbDirection,
    pub gamma_init: f64,
    pub gamma_tol: f64,
    pub lambda_init: f64,
    pub halving_steps: usize,
}

impl AttackPlan {
    /// A no-op plan (no malicious behavior).
    pub fn none() -> Self {
        AttackPlan {
            kind: AttackKind::None,
            scale: 1.0,
            poison_fraction: 0.0,
            trigger: TriggerSpec::new(vec![0], 0.0, 0).expect("static trigger"),
            direction: PerturbDirection::InverseStd,
            gamma_init: 10.0,
            gamma_tol: 1e-3,
            lambda_init: 10.0,
            halving_steps: 20,
        }
    }
}

/// Everything an update-crafting attack can see: the honest updates of the
/// whole population, which clients it controls, and the global model.
#[derive(Debug)]
pub struct AttackContext<'a> {
    pub honest_deltas: &'a [ParamVector],
    pub malicious: &'a [usize],
    pub global: &'a ParamVector,
    pub round: usize,
}

impl AttackContext<'_> {
    fn check(&self) -> Result<()> {
        if self.malicious.is_empty() {
            return Err(Error::Usage("attack invoked with no malicious clients".into()));
        }
        if self.honest_deltas.is_empty() {
            return Err(Error::Usage("attack context has no honest updates".into()));
        }
        Ok(())
    }
}

/// Replace every label `y` with `C - 1 - y`; features are untouched. The
/// malicious client then trains honestly on the flipped set.
pub fn label_flip(ds: &LabeledDataset) -> LabeledDataset {
    LabeledDataset {
        features: ds.features.clone(),
        labels: ds.labels.iter().map(|&y| ds.classes - 1 - y).collect(),
        classes: ds.classes,
    }
}

/// Coordinate-wise mean and population standard deviation of a set of
/// updates.
fn population_stats(deltas: &[ParamVector]) -> (Vec<f64>, Vec<f64>) {
    let n = deltas.len() as f64;
    let total = deltas[0].len();
    let mut mean = vec![0.0; total];
    for d in deltas {
        for (m, v) in mean.iter_mut().zip(d.values()) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; total];
    for d in deltas {
        for ((s, m), v) in std.iter_mut().zip(&mean).zip(d.values()) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt();
    }
    (mean, std)
}

/// Directed deviation against coordinate-wise trimming: each malicious
/// coordinate is sampled from `[mu + 3 sigma, mu + 4 sigma]` when the
/// honest mean points down and from `[mu - 4 sigma, mu - 3 sigma]`
/// otherwise, per client.
pub fn fang_trim(ctx: &AttackContext, rng: &mut ChaCha8Rng) -> Result<Vec<ParamVector>> {
    ctx.check()?;
    if ctx.honest_deltas.len() < 2 {
        return Err(Error::Usage("fang-trim needs at least 2 honest updates".into()));
    }
    let (mean, std) = population_stats(ctx.honest_deltas);
    let layout = ctx.honest_deltas[0].layout().clone();
    let mut out = Vec::with_capacity(ctx.malicious.len());
    for _ in ctx.malicious {
        let values: Vec<f64> = mean
            .iter()
            .zip(&std)
            .map(|(&m, &s)| {
                if s == 0.0 {
                    return m;
                }
                if m < 0.0 {
                    rng.random_range(m + 3.0 * s..m + 4.0 * s)
                } else {
                    rng.random_range(m - 4.0 * s..m - 3.0 * s)
                }
            })
            .collect();
        out.push(ParamVector::new(values, layout.clone())?);
    }
    Ok(out)
}

/// Krum-targeted attack: candidates `lambda * sign(mean honest delta)` plus
/// per-client noise with entries in `[-1e-4, 1e-4]`. `lambda` starts at
/// `lambda_init` and halves until Krum (with the defender's assumed `n_m`)
/// selects a malicious client; if no tested `lambda` works, the
/// smallest-lambda candidates are returned.
pub fn fang_krum(
    ctx: &AttackContext,
    assumed_malicious: usize,
    lambda_init: f64,
    halving_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ParamVector>> {
    ctx.check()?;
    let layout = ctx.honest_deltas[0].layout().clone();
    let total = layout.total();
    let mean = mean_vector(ctx.honest_deltas)?;
    let sign: Vec<f64> = mean.values().iter().map(|v| v.signum()).collect();

    let noises: Vec<Vec<f64>> = ctx
        .malicious
        .iter()
        .map(|_| (0..total).map(|_| rng.random_range(-1e-4..1e-4)).collect())
        .collect();

    let candidates = |lambda: f64| -> Result<Vec<ParamVector>> {
        noises
            .iter()
            .map(|noise| {
                let values: Vec<f64> = sign
                    .iter()
                    .zip(noise)
                    .map(|(s, n)| lambda * s + n)
                    .collect();
                ParamVector::new(values, layout.clone())
            })
            .collect()
    };

    // Would Krum over (benign honest + crafted malicious) pick a malicious
    // client? Population order preserves client ids.
    let feasible = |crafted: &[ParamVector]| -> bool {
        let mut population: Vec<ParamVector> = Vec::with_capacity(ctx.honest_deltas.len());
        let mut malicious_rank = 0;
        let mut malicious_positions = Vec::new();
        for i in 0..ctx.honest_deltas.len() {
            if ctx.malicious.contains(&i) {
                population.push(crafted[malicious_rank].clone());
                malicious_positions.push(population.len() - 1);
                malicious_rank += 1;
            } else {
                population.push(ctx.honest_deltas[i].clone());
            }
        }
        match krum_select(&population, assumed_malicious) {
            Ok(winner) => malicious_positions.contains(&winner),
            Err(_) => false,
        }
    };

    let mut lambda = lambda_init;
    let mut crafted = candidates(lambda)?;
    for _ in 0..halving_steps {
        if feasible(&crafted) {
            return Ok(crafted);
        }
        lambda /= 2.0;
        crafted = candidates(lambda)?;
    }
    Ok(crafted)
}

fn euclidean(a: &ParamVector, b: &ParamVector) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The AGR-agnostic attack: all malicious clients submit `mu + gamma * p`
/// where `p` is the perturbation direction and `gamma` is the largest
/// feasible value found by bracketed bisection (tolerance `gamma_tol`).
///
/// Feasibility: `min-max` keeps the crafted update no farther from any
/// honest update than the worst honest pair; `min-sum` bounds the sum of
/// squared distances by the worst honest client's sum. `gamma = 0` is
/// always feasible (the mean satisfies both), so the search is well posed.
pub fn agr_agnostic(
    ctx: &AttackContext,
    mode: AgrMode,
    direction: PerturbDirection,
    gamma_init: f64,
    gamma_tol: f64,
) -> Result<Vec<ParamVector>> {
    ctx.check()?;
    if ctx.honest_deltas.len() < 2 {
        return Err(Error::Usage("agr-agnostic needs at least 2 honest updates".into()));
    }
    if gamma_init <= 0.0 || gamma_tol <= 0.0 {
        return Err(Error::Usage("gamma_init and gamma_tol must be positive".into()));
    }
    let deltas = ctx.honest_deltas;
    let layout = deltas[0].layout().clone();
    let (mean_v, std_v) = population_stats(deltas);
    let mean = ParamVector::new(mean_v.clone(), layout.clone())?;

    let p_values: Vec<f64> = match direction {
        PerturbDirection::InverseStd => std_v.iter().map(|s| -s).collect(),
        PerturbDirection::InverseUnit => {
            let norm = mean.norm();
            if norm == 0.0 {
                vec![0.0; layout.total()]
            } else {
                mean_v.iter().map(|m| -m / norm).collect()
            }
        }
        PerturbDirection::InverseSign => mean_v.iter().map(|m| -m.signum()).collect(),
    };
    let p = ParamVector::new(p_values, layout.clone())?;
    if p.norm() == 0.0 {
        // Degenerate population (identical updates): the mean is the only
        // feasible point.
        return Ok(vec![mean; ctx.malicious.len()]);
    }

    let n = deltas.len();
    let bound = match mode {
        AgrMode::MinMax => {
            let mut max = 0.0f64;
            for i in 0..n {
                for j in (i + 1)..n {
                    max = max.max(euclidean(&deltas[i], &deltas[j]));
                }
            }
            max
        }
        AgrMode::MinSum => {
            let mut worst = 0.0f64;
            for j in 0..n {
                let sum: f64 = deltas
                    .iter()
                    .map(|d| {
                        let e = euclidean(&deltas[j], d);
                        e * e
                    })
                    .sum();
                worst = worst.max(sum);
            }
            worst
        }
    };

    let feasible = |gamma: f64| -> bool {
        let m = mean.add_scaled(&p, gamma).expect("same layout");
        match mode {
            AgrMode::MinMax => deltas
                .iter()
                .map(|d| euclidean(&m, d))
                .fold(0.0f64, f64::max)
                <= bound,
            AgrMode::MinSum => {
                deltas
                    .iter()
                    .map(|d| {
                        let e = euclidean(&m, d);
                        e * e
                    })
                    .sum::<f64>()
                    <= bound
            }
        }
    };

    // Bracket: lo feasible, hi infeasible.
    let mut lo;
    let mut hi;
    if feasible(gamma_init) {
        lo = gamma_init;
        hi = gamma_init * 2.0;
        let mut guard = 0;
        while feasible(hi) {
            lo = hi;
            hi *= 2.0;
            guard += 1;
            if guard > 60 {
                break;
            }
        }
    } else {
        hi = gamma_init;
        lo = gamma_init / 2.0;
        let mut guard = 0;
        while !feasible(lo) {
            hi = lo;
            lo /= 2.0;
            guard += 1;
            if guard > 60 {
                lo = 0.0;
                break;
            }
        }
    }
    let mut iters = 0;
    while hi - lo > gamma_tol && iters < 50 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
    }

    let crafted = mean.add_scaled(&p, lo)?;
    Ok(vec![crafted; ctx.malicious.len()])
}

/// The scaling backdoor: each malicious client trains honestly on its
/// trigger-embedded dataset and submits `scale * delta`.
#[allow(clippy::too_many_arguments)]
pub fn scaling_backdoor(
    global: &ParamVector,
    malicious_data: &[(usize, &LabeledDataset)],
    trig: &TriggerSpec,
    poison_fraction: f64,
    scale: f64,
    local_iters: usize,
    lr: f64,
    batch_size: usize,
    seeds: &[u64],
) -> Result<Vec<ClientUpdate>> {
    if scale <= 0.0 {
        return Err(Error::Usage("scaling attack needs scale > 0".into()));
    }
    if seeds.len() != malicious_data.len() {
        return Err(Error::Config("one seed per malicious client required".into()));
    }
    let mut out = Vec::with_capacity(malicious_data.len());
    for (&seed, &(client_id, data)) in seeds.iter().zip(malicious_data) {
        let poisoned = data::embed_trigger(data, trig, poison_fraction)?;
        let honest = local_train(global, &poisoned, local_iters, lr, batch_size, seed, client_id)?;
        out.push(ClientUpdate::from_delta(
            client_id,
            global,
            honest.delta.scale(scale),
            honest.dataset_size,
        )?);
    }
    Ok(out)
}

/// Split the trigger coordinates round-robin into `n_m` sub-triggers for
/// the distributed backdoor; client `j` embeds only sub-trigger `j`.
/// Evaluation always uses the full trigger.
pub fn dba_assign(trig: &TriggerSpec, n_m: usize) -> Result<Vec<TriggerSpec>> {
    if n_m == 0 {
        return Err(Error::Usage("dba needs at least one malicious client".into()));
    }
    if trig.indices.len() < n_m {
        return Err(Error::Usage(format!(
            "dba cannot split {} trigger indices over {n_m} clients",
            trig.indices.len()
        )));
    }
    let mut subs = vec![Vec::new(); n_m];
    for (pos, &idx) in trig.indices.iter().enumerate() {
        subs[pos % n_m].push(idx);
    }
    subs.into_iter()
        .map(|indices| TriggerSpec::new(indices, trig.value, trig.target))
        .collect()
}
