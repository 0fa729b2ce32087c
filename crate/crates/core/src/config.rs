//! Declarative experiment configuration.
//!
//! The on-disk format is flat `key = value` text with dotted key paths and
//! `#` comments. Every key has a default, unknown keys are rejected, and
//! validation errors name the offending key. `serialize` emits the full
//! canonical key set, so `load(serialize(cfg))` round-trips exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::attacks::{AttackKind, AttackPlan, PerturbDirection};
use crate::data::TriggerSpec;
use crate::defenses::{DefenseKind, DefensePlan};
use crate::error::{Error, Result};
use crate::fl::FlParams;
use crate::skymask::MaskHyper;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetConfig {
    pub classes: usize,
    pub features: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionConfig {
    pub clients: usize,
    /// Non-IID bias probability `p`.
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RootConfig {
    pub size: usize,
    /// Fraction of the root dataset drawn from `bias_class`.
    pub bias: f64,
    pub bias_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Hidden-layer widths; empty means multinomial logistic regression.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlConfig {
    pub rounds: usize,
    /// Local iterations per round (`l`).
    pub local_iters: usize,
    /// Local learning rate (`beta`).
    pub client_lr: f64,
    /// Global learning rate (`alpha`).
    pub global_lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Fraction of clients the attacker controls.
    pub fraction: f64,
    /// Update scale for backdoor attacks; `None` = auto (n / n_m).
    pub scale: Option<f64>,
    pub poison_fraction: f64,
    pub trigger_indices: Vec<usize>,
    pub trigger_value: f64,
    pub target_class: usize,
    pub direction: PerturbDirection,
    pub gamma_init: f64,
    pub gamma_tol: f64,
    pub lambda_init: f64,
    pub halving_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// `n_m` assumed by Krum/Trim; `None` = auto (attacked count, capped
    /// for rule validity).
    pub assumed_malicious: Option<usize>,
    /// Mask binarization threshold `tau`.
    pub threshold: f64,
    /// Mask learning rate `gamma`.
    pub mask_lr: f64,
    pub mask_max_iters: usize,
    /// Mask convergence tolerance `epsilon`.
    pub mask_tol: f64,
    pub pca_dims: usize,
    pub gmm_restarts: usize,
}

/// Full declarative description of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub root: RootConfig,
    pub model: ModelConfig,
    pub fl: FlConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub seed: u64,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig {
                classes: 3,
                features: 8,
                train_n: 3000,
                test_n: 1000,
                spread: 0.25,
            },
            partition: PartitionConfig {
                clients: 20,
                bias: 0.5,
            },
            root: RootConfig {
                size: 100,
                bias: 0.0,
                bias_class: 0,
            },
            model: ModelConfig { hidden: vec![16] },
            fl: FlConfig {
                rounds: 50,
                local_iters: 5,
                client_lr: 0.05,
                global_lr: 1.0,
                batch_size: 32,
            },
            attack: AttackConfig {
                kind: AttackKind::None,
                fraction: 0.2,
                scale: None,
                poison_fraction: 0.5,
                trigger_indices: vec![4, 5, 6, 7],
                trigger_value: 0.75,
                target_class: 0,
                direction: PerturbDirection::InverseStd,
                gamma_init: 10.0,
                gamma_tol: 1e-3,
                lambda_init: 10.0,
                halving_steps: 20,
            },
            defense: DefenseConfig {
                kind: DefenseKind::FedAvg,
                assumed_malicious: None,
                threshold: 0.5,
                mask_lr: 20.0,
                mask_max_iters: 300,
                mask_tol: 1e-6,
                pca_dims: 4,
                gmm_restarts: 32,
            },
            seed: 42,
            output_dir: "runs".into(),
        }
    }
}

fn key_err(key: &str, message: impl Into<String>) -> Error {
    Error::ConfigKey {
        key: key.into(),
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| key_err(key, format!("cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|cell| {
            cell.trim()
                .parse::<usize>()
                .map_err(|_| key_err(key, format!("cannot parse list entry `{cell}`")))
        })
        .collect()
}

impl ExperimentConfig {
    /// Set one `key = value` pair, validating the value in isolation.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset.classes" => {
                let v = parse_num(key, value)?;
                if v < 2 {
                    return Err(key_err(key, "needs at least 2 classes"));
                }
                self.dataset.classes = v;
            }
            "dataset.features" => {
                let v = parse_num(key, value)?;
                if v == 0 {
                    return Err(key_err(key, "must be positive"));
                }
                self.dataset.features = v;
            }
            "dataset.train_n" => self.dataset.train_n = parse_num(key, value)?,
            "dataset.test_n" => self.dataset.test_n = parse_num(key, value)?,
            "dataset.spread" => {
                let v = parse_num(key, value)?;
                if v <= 0.0 {
                    return Err(key_err(key, "must be positive"));
                }
                self.dataset.spread = v;
            }
            "partition.clients" => {
                let v = parse_num(key, value)?;
                if v == 0 {
                    return Err(key_err(key, "needs at least one client"));
                }
                self.partition.clients = v;
            }
            "partition.bias" => {
                let v: f64 = parse_num(key, value)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(key_err(key, "must be in [0, 1]"));
                }
                self.partition.bias = v;
            }
            "root.size" => {
                let v = parse_num(key, value)?;
                if v == 0 {
                    return Err(key_err(key, "must be positive"));
                }
                self.root.size = v;
            }
            "root.bias" => {
                let v: f64 = parse_num(key, value)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(key_err(key, "must be in [0, 1]"));
                }
                self.root.bias = v;
            }
            "root.bias_class" => self.root.bias_class = parse_num(key, value)?,
            "model.hidden" => {
                let widths = parse_list(key, value)?;
                if widths.contains(&0) {
                    return Err(key_err(key, "hidden widths must be positive"));
                }
                self.model.hidden = widths;
            }
            "fl.rounds" => {
                let v = parse_num(key, value)?;
                if v == 0 {
                    return Err(key_err(key, "needs at least one round"));
                }
                self.fl.rounds = v;
            }
            "fl.local_iters" => {
                let v = parse_num(key, value)?;
                if v == 0 {
                    return Err(key_err(key, "needs at least one local iteration"));
                }
                self.fl.local_iters = v;
            }
            "fl.client_lr" => {
                let v: f64 = parse_num(key, value)?;
                if v < 0.0 {
                    return Err(key_err(key, "must be non-negative"));
                }
                self.fl.client_lr = v;
            }
            "fl.global_lr" => {
                let v: f64 = parse_num(key, value)?;
                if v <= 0.0 {
                    return Err(key_err(key, "must be positive"));
                }
                self.fl.global_lr = v;
            }
            "fl.batch_size" => {
                let v = parse_num(key, value)?;
                if v == 0 {
                    return Err(key_err(key, "must be positive"));
                }
                self.fl.batch_size = v;
            }
            "attack.kind" => {
                self.attack.kind = AttackKind::parse(value)
                    .ok_or_else(|| key_err(key, format!("unknown attack `{value}`")))?;
            }
            "attack.fraction" => {
                let v: f64 = parse_num(key, value)?;
                if !(0.0..1.0).contains(&v) {
                    return Err(key_err(key, "must be in [0, 1)"));
                }
                self.attack.fraction = v;
            }
            "attack.scale" => {
                self.attack.scale = if value == "auto" {
                    None
                } else {
                    let v: f64 = parse_num(key, value)?;
                    if v <= 0.0 {
                        return Err(key_err(key, "must be positive or `auto`"));
                    }
                    Some(v)
                };
            }
            "attack.poison_fraction" => {
                let v: f64 = parse_num(key, value)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(key_err(key, "must be in [0, 1]"));
                }
                self.attack.poison_fraction = v;
            }
            "attack.trigger_indices" => {
                let indices = parse_list(key, value)?;
                if indices.is_empty() {
                    return Err(key_err(key, "needs at least one index"));
                }
                self.attack.trigger_indices = indices;
            }
            "attack.trigger_value" => self.attack.trigger_value = parse_num(key, value)?,
            "attack.target_class" => self.attack.target_class = parse_num(key, value)?,
            "attack.direction" => {
                self.attack.direction = PerturbDirection::parse(value)
                    .ok_or_else(|| key_err(key, format!("unknown direction `{value}`")))?;
            }
            "attack.gamma_init" => {
                let v: f64 = parse_num(key, value)?;
                if v <= 0.0 {
                    return Err(key_err(key, "must be positive"));
                }
                self.attack.gamma_init = v;
            }
            "attack.gamma_tol" => {
                let v: f64 = parse_num(key, value)?;
                if v <= 0.0 {
                    return Err(key_err(key, "must be positive"));
                }
                self.attack.gamma_tol = v;
            }
            "attack.lambda_init" => {
                let v: f64 = parse_num(key, value)?;
                if v <= 0.0 {
                    return Err(key_err(key, "must be positive"));
                }
                self.attack.lambda_init = v;
            }
            "attack.halving_steps" => self.attack.halving_steps = parse_num(key, value)?,
            "defense.kind" => {
                self.defense.kind = DefenseKind::parse(value)
                    .ok_or_else(|| key_err(key, format!("unknown defense `{value}`")))?;
            }
            "defense.assumed_malicious" => {
                self.defense.assumed_malicious = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                };
            }
            "defense.threshold" => {
                let v: f64 = parse_num(key, value)?;
                if !(v > 0.0 && v < 1.0) {
                    return Err(key_err(key, "must be in (0, 1)"));
                }
                self.defense.threshold = v;
            }
            "defense.mask_lr" => {
                let v: f64 = parse_num(key, value)?;
                if v <= 0.0 {
                    return Err(key_err(key, "must be positive"));
                }
                self.defense.mask_lr = v;
            }
            "defense.mask_max_iters" => {
                let v = parse_num(key, value)?;
                if v == 0 {
                    return Err(key_err(key, "needs at least one iteration"));
                }
                self.defense.mask_max_iters = v;
            }
            "defense.mask_tol" => {
                let v: f64 = parse_num(key, value)?;
                if v <= 0.0 {
                    return Err(key_err(key, "must be positive"));
                }
                self.defense.mask_tol = v;
            }
            "defense.pca_dims" => {
                let v = parse_num(key, value)?;
                if v == 0 {
                    return Err(key_err(key, "must be positive"));
                }
                self.defense.pca_dims = v;
            }
            "defense.gmm_restarts" => {
                let v = parse_num(key, value)?;
                if v == 0 {
                    return Err(key_err(key, "needs at least one restart"));
                }
                self.defense.gmm_restarts = v;
            }
            "seed" => self.seed = parse_num(key, value)?,
            "output_dir" => self.output_dir = value.to_string(),
            _ => return Err(key_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Cross-field checks that single-key `apply` cannot see.
    pub fn validate(&self) -> Result<()> {
        let c = self.dataset.classes;
        if self.root.bias_class >= c {
            return Err(key_err(
                "root.bias_class",
                format!("class {} out of range for {c} classes", self.root.bias_class),
            ));
        }
        if self.attack.target_class >= c {
            return Err(key_err(
                "attack.target_class",
                format!("class {} out of range for {c} classes", self.attack.target_class),
            ));
        }
        if let Some(&bad) = self
            .attack
            .trigger_indices
            .iter()
            .find(|&&i| i >= self.dataset.features)
        {
            return Err(key_err(
                "attack.trigger_indices",
                format!("index {bad} out of range for {} features", self.dataset.features),
            ));
        }
        {
            let mut sorted = self.attack.trigger_indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.attack.trigger_indices.len() {
                return Err(key_err("attack.trigger_indices", "indices must be distinct"));
            }
        }
        if self.dataset.train_n < self.dataset.classes {
            return Err(key_err("dataset.train_n", "fewer samples than classes"));
        }
        if self.attack.kind == AttackKind::Dba {
            let n_m = self.n_malicious();
            if n_m > 0 && self.attack.trigger_indices.len() < n_m {
                return Err(key_err(
                    "attack.trigger_indices",
                    format!("dba needs at least {n_m} trigger indices"),
                ));
            }
        }
        Ok(())
    }

    /// Number of attacker-controlled clients: `ceil(fraction * n)`, zero
    /// when no attack is configured.
    pub fn n_malicious(&self) -> usize {
        if self.attack.kind == AttackKind::None {
            0
        } else {
            (self.attack.fraction * self.partition.clients as f64).ceil() as usize
        }
    }

    /// The `n_m` Krum/Trim assume: the explicit setting, or the attacked
    /// count capped so both rules stay well defined.
    pub fn resolved_assumed_malicious(&self) -> usize {
        let n = self.partition.clients;
        let cap = ((n.saturating_sub(1)) / 2).min(n.saturating_sub(3));
        match self.defense.assumed_malicious {
            Some(v) => v,
            None => self.n_malicious().max(1).min(cap),
        }
    }

    /// Resolve the runtime attack plan.
    pub fn attack_plan(&self) -> Result<AttackPlan> {
        let n = self.partition.clients;
        let n_m = self.n_malicious().max(1);
        let scale = self.attack.scale.unwrap_or(n as f64 / n_m as f64);
        Ok(AttackPlan {
            kind: self.attack.kind,
            scale,
            poison_fraction: self.attack.poison_fraction,
            trigger: TriggerSpec::new(
                self.attack.trigger_indices.clone(),
                self.attack.trigger_value,
                self.attack.target_class,
            )?,
            direction: self.attack.direction,
            gamma_init: self.attack.gamma_init,
            gamma_tol: self.attack.gamma_tol,
            lambda_init: self.attack.lambda_init,
            halving_steps: self.attack.halving_steps,
        })
    }

    /// Resolve the runtime defense plan.
    pub fn defense_plan(&self) -> DefensePlan {
        DefensePlan {
            kind: self.defense.kind,
            assumed_malicious: self.resolved_assumed_malicious(),
            mask: MaskHyper {
                mask_lr: self.defense.mask_lr,
                max_iters: self.defense.mask_max_iters,
                tol: self.defense.mask_tol,
                threshold: self.defense.threshold,
                pca_dims: self.defense.pca_dims,
                gmm_restarts: self.defense.gmm_restarts,
            },
        }
    }

    pub fn fl_params(&self) -> FlParams {
        FlParams {
            local_iters: self.fl.local_iters,
            client_lr: self.fl.client_lr,
            global_lr: self.fl.global_lr,
            batch_size: self.fl.batch_size,
        }
    }

    /// Canonical flat `key = value` form covering every key.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let list = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("dataset.classes", self.dataset.classes.to_string());
        kv("dataset.features", self.dataset.features.to_string());
        kv("dataset.train_n", self.dataset.train_n.to_string());
        kv("dataset.test_n", self.dataset.test_n.to_string());
        kv("dataset.spread", self.dataset.spread.to_string());
        kv("partition.clients", self.partition.clients.to_string());
        kv("partition.bias", self.partition.bias.to_string());
        kv("root.size", self.root.size.to_string());
        kv("root.bias", self.root.bias.to_string());
        kv("root.bias_class", self.root.bias_class.to_string());
        kv("model.hidden", list(&self.model.hidden));
        kv("fl.rounds", self.fl.rounds.to_string());
        kv("fl.local_iters", self.fl.local_iters.to_string());
        kv("fl.client_lr", self.fl.client_lr.to_string());
        kv("fl.global_lr", self.fl.global_lr.to_string());
        kv("fl.batch_size", self.fl.batch_size.to_string());
        kv("attack.kind", self.attack.kind.as_str().to_string());
        kv("attack.fraction", self.attack.fraction.to_string());
        kv(
            "attack.scale",
            self.attack
                .scale
                .map_or("auto".to_string(), |v| v.to_string()),
        );
        kv("attack.poison_fraction", self.attack.poison_fraction.to_string());
        kv("attack.trigger_indices", list(&self.attack.trigger_indices));
        kv("attack.trigger_value", self.attack.trigger_value.to_string());
        kv("attack.target_class", self.attack.target_class.to_string());
        kv("attack.direction", self.attack.direction.as_str().to_string());
        kv("attack.gamma_init", self.attack.gamma_init.to_string());
        kv("attack.gamma_tol", self.attack.gamma_tol.to_string());
        kv("attack.lambda_init", self.attack.lambda_init.to_string());
        kv("attack.halving_steps", self.attack.halving_steps.to_string());
        kv("defense.kind", self.defense.kind.as_str().to_string());
        kv(
            "defense.assumed_malicious",
            self.defense
                .assumed_malicious
                .map_or("auto".to_string(), |v| v.to_string()),
        );
        kv("defense.threshold", self.defense.threshold.to_string());
        kv("defense.mask_lr", self.defense.mask_lr.to_string());
        kv("defense.mask_max_iters", self.defense.mask_max_iters.to_string());
        kv("defense.mask_tol", self.defense.mask_tol.to_string());
        kv("defense.pca_dims", self.defense.pca_dims.to_string());
        kv("defense.gmm_restarts", self.defense.gmm_restarts.to_string());
        kv("seed", self.seed.to_string());
        kv("output_dir", self.output_dir.clone());
        out
    }

    /// Parse flat `key = value` text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", ln + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Load and validate a config file; an empty file yields the defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::parse_str(&text).map_err(|e| match e {
        Error::Config(message) => Error::ConfigFile {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.partition.clients, 20);
        assert_eq!(cfg.root.size, 100);
        assert_eq!(cfg.attack.fraction, 0.2);
    }

    #[test]
    fn out_of_range_fraction_names_the_key() {
        let err = ExperimentConfig::parse_str("attack.fraction = 1.5").unwrap_err();
        match err {
            Error::ConfigKey { key, .. } => assert_eq!(key, "attack.fraction"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::parse_str("attack.strength = 3").unwrap_err();
        match err {
            Error::ConfigKey { key, message } => {
                assert_eq!(key, "attack.strength");
                assert!(message.contains("unknown"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn serialize_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply("attack.kind", "min-sum").unwrap();
        cfg.apply("defense.kind", "skymask-nr").unwrap();
        cfg.apply("fl.client_lr", "0.075").unwrap();
        cfg.apply("defense.mask_tol", "1e-7").unwrap();
        cfg.apply("attack.scale", "3.5").unwrap();
        cfg.apply("model.hidden", "32,16").unwrap();
        let text = cfg.serialize();
        let reloaded = ExperimentConfig::parse_str(&text).unwrap();
        assert_eq!(cfg, reloaded);
        // And once more through the serializer.
        assert_eq!(text, reloaded.serialize());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = ExperimentConfig::parse_str(
            "# experiment\n\nseed = 7\n  # indented comment\npartition.clients = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.partition.clients, 10);
    }

    #[test]
    fn cross_field_validation_names_keys() {
        let err = ExperimentConfig::parse_str("attack.target_class = 9").unwrap_err();
        match err {
            Error::ConfigKey { key, .. } => assert_eq!(key, "attack.target_class"),
            other => panic!("unexpected error {other:?}"),
        }
        let err = ExperimentConfig::parse_str("attack.trigger_indices = 0,99").unwrap_err();
        match err {
            Error::ConfigKey { key, .. } => assert_eq!(key, "attack.trigger_indices"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malicious_count_is_ceiling() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply("attack.kind", "fang-trim").unwrap();
        cfg.apply("attack.fraction", "0.2").unwrap();
        assert_eq!(cfg.n_malicious(), 4);
        cfg.apply("attack.fraction", "0.21").unwrap();
        assert_eq!(cfg.n_malicious(), 5);
        cfg.apply("attack.kind", "none").unwrap();
        assert_eq!(cfg.n_malicious(), 0);
    }

    #[test]
    fn assumed_malicious_is_capped_for_rule_validity() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply("attack.kind", "fang-trim").unwrap();
        cfg.apply("attack.fraction", "0.8").unwrap();
        // n = 20, true count 16, capped at floor(19/2) = 9.
        assert_eq!(cfg.resolved_assumed_malicious(), 9);
        cfg.apply("defense.assumed_malicious", "4").unwrap();
        assert_eq!(cfg.resolved_assumed_malicious(), 4);
    }

    #[test]
    fn auto_scale_resolves_to_population_ratio() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply("attack.kind", "scaling").unwrap();
        let plan = cfg.attack_plan().unwrap();
        // n = 20, n_m = 4.
        assert_eq!(plan.scale, 5.0);
    }
}
