//! Experiment orchestration: build the data world from a config, play the
//! configured number of communication rounds, and collect per-round
//! metrics.

use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::data::{self, LabeledDataset, RootDataset};
use crate::error::Result;
use crate::fl::{self, RoundState};
use crate::nn::{self, Batch, ParamVector};
use crate::rng;
use crate::skymask::DetectionReport;

/// Metrics of one communication round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub accuracy: f64,
    /// Fraction of trigger-embedded test samples classified as the target
    /// label; present only for targeted attacks.
    pub attack_success: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub benign_count: Option<usize>,
    pub mask_iterations: Option<usize>,
    /// Wall-clock seconds; diagnostic only, never written to the
    /// deterministic artifacts.
    pub wall_secs: f64,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub reports: Vec<Option<DetectionReport>>,
    pub malicious_truth: Vec<bool>,
    pub final_global: ParamVector,
}

/// The datasets and initial model derived from a config. Train, test, and
/// root-pool draws come from distinct seeded streams, so the three sets are
/// disjoint by construction.
pub struct World {
    pub clients: Vec<LabeledDataset>,
    pub root: RootDataset,
    pub test: Batch,
    /// Test samples of non-target classes with the full trigger embedded;
    /// present for targeted attacks.
    pub triggered_test: Option<Batch>,
    pub initial_global: ParamVector,
}

/// Materialize datasets, partition, root set, and the initial model.
pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    cfg.validate()?;
    let d = &cfg.dataset;
    let seed = cfg.seed;

    let train = data::gen_synthetic(d.classes, d.features, d.train_n, d.spread, rng::derive(seed, "world/train"))?;
    let test = data::gen_synthetic(d.classes, d.features, d.test_n, d.spread, rng::derive(seed, "world/test"))?;
    // The pool is oversized so even a fully biased root draw can succeed.
    let pool_n = cfg.root.size * (d.classes + 1).max(4);
    let pool = data::gen_synthetic(d.classes, d.features, pool_n, d.spread, rng::derive(seed, "world/pool"))?;
    let root = data::build_root(
        &pool,
        cfg.root.size,
        cfg.root.bias,
        cfg.root.bias_class,
        rng::derive(seed, "world/root"),
    )?;

    let clients = data::partition_noniid(
        &train,
        &data::PartitionSpec {
            n_clients: cfg.partition.clients,
            bias: cfg.partition.bias,
            seed: rng::derive(seed, "world/partition"),
        },
    )?;

    let layout = nn::LayerLayout::mlp(d.features, &cfg.model.hidden, d.classes)?;
    let initial_global = nn::init_params(&layout, rng::derive(seed, "world/init"));

    let triggered_test = if cfg.attack.kind.is_targeted() {
        let plan = cfg.attack_plan()?;
        // Success is measured on non-target samples carrying the full
        // trigger, so pre-poisoned target-class samples cannot inflate it.
        let keep: Vec<usize> = (0..test.len())
            .filter(|&i| test.labels[i] != plan.trigger.target)
            .collect();
        let non_target = test.select(&keep);
        let triggered = data::embed_trigger(&non_target, &plan.trigger, 1.0)?;
        Some(triggered.to_batch()?)
    } else {
        None
    };

    Ok(World {
        clients,
        root,
        test: test.to_batch()?,
        triggered_test,
        initial_global,
    })
}

/// Run the configured number of rounds and record metrics per round.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let world = build_world(cfg)?;
    let attack = cfg.attack_plan()?;
    let defense = cfg.defense_plan();
    let fl_params = cfg.fl_params();
    let n_malicious = cfg.n_malicious();

    let mut state = RoundState::initial(
        world.initial_global.clone(),
        cfg.partition.clients,
        n_malicious,
    );
    let malicious_truth = state.malicious_truth.clone();

    let mut records = Vec::with_capacity(cfg.fl.rounds);
    let mut reports = Vec::with_capacity(cfg.fl.rounds);
    for _ in 0..cfg.fl.rounds {
        let start = Instant::now();
        let round = state.round;
        let (next, report) = fl::run_round(
            &state,
            &world.clients,
            &world.root,
            &attack,
            &defense,
            &fl_params,
            cfg.seed,
        )?;
        state = next;

        let accuracy = nn::evaluate(&state.global, &world.test)?;
        // embed_trigger relabels to the target class, so plain accuracy on
        // the triggered set is exactly the attack success rate.
        let attack_success = match &world.triggered_test {
            Some(batch) => Some(nn::evaluate(&state.global, batch)?),
            None => None,
        };
        records.push(RoundRecord {
            round,
            accuracy,
            attack_success,
            fpr: report.as_ref().and_then(|r| r.fpr),
            fnr: report.as_ref().and_then(|r| r.fnr),
            benign_count: report.as_ref().map(|r| r.benign.len()),
            mask_iterations: report.as_ref().map(|r| r.mask_iterations),
            wall_secs: start.elapsed().as_secs_f64(),
        });
        reports.push(report);
    }

    Ok(ExperimentOutput {
        records,
        reports,
        malicious_truth,
        final_global: state.global,
    })
}

fn mean_of_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Mean FPR and FNR over the rounds where each is defined.
pub fn mean_rates(records: &[RoundRecord]) -> (Option<f64>, Option<f64>) {
    (
        mean_of_defined(records.iter().map(|r| r.fpr)),
        mean_of_defined(records.iter().map(|r| r.fnr)),
    )
}

/// Mean attack success rate over the rounds where it is defined.
pub fn mean_attack_success(records: &[RoundRecord]) -> Option<f64> {
    mean_of_defined(records.iter().map(|r| r.attack_success))
}
