//! Artifact emission: per-round CSV metrics, a JSON summary with a
//! lossless config echo, and per-round detection dumps for plotting.
//!
//! Everything except `timing.txt` is a pure function of `(config, seed)`,
//! so reruns produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::runner::{mean_attack_success, mean_rates, ExperimentOutput};

pub const ROUNDS_CSV_HEADER: &str =
    "round,accuracy,attack_success_rate,fpr,fnr,benign_count,mask_iters";
pub const PCA_CSV_HEADER: &str = "client_id,x,y,is_malicious_truth,verdict";
pub const MASK_LAYERS_CSV_HEADER: &str = "round,client_id,layer,ones_fraction,is_malicious_truth";

#[derive(Serialize)]
struct Summary<'a> {
    final_accuracy: Option<f64>,
    mean_fpr: Option<f64>,
    mean_fnr: Option<f64>,
    mean_attack_success: Option<f64>,
    rounds: usize,
    config: &'a ExperimentConfig,
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Write all artifacts of one run into `dir` (created if missing).
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut rounds = String::from(ROUNDS_CSV_HEADER);
    rounds.push('\n');
    for r in &out.records {
        let _ = writeln!(
            rounds,
            "{},{},{},{},{},{},{}",
            r.round,
            r.accuracy,
            fmt_opt(&r.attack_success),
            fmt_opt(&r.fpr),
            fmt_opt(&r.fnr),
            fmt_opt(&r.benign_count),
            fmt_opt(&r.mask_iterations),
        );
    }
    write_file(&dir.join("rounds.csv"), &rounds)?;

    let (mean_fpr, mean_fnr) = mean_rates(&out.records);
    let summary = Summary {
        final_accuracy: out.records.last().map(|r| r.accuracy),
        mean_fpr,
        mean_fnr,
        mean_attack_success: mean_attack_success(&out.records),
        rounds: out.records.len(),
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization failed: {e}")))?;
    write_file(&dir.join("summary.json"), &format!("{json}\n"))?;

    for (record, report) in out.records.iter().zip(&out.reports) {
        let Some(report) = report else { continue };
        let t = record.round;
        if let Some(projection) = &report.projection {
            let mut csv = String::from(PCA_CSV_HEADER);
            csv.push('\n');
            for (client, (x, y)) in projection.iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{client},{x},{y},{},{}",
                    out.malicious_truth[client],
                    if report.verdicts[client] { "malicious" } else { "benign" },
                );
            }
            write_file(&dir.join(format!("pca_round_{t}.csv")), &csv)?;
        }
        if let Some(layer_ones) = &report.layer_ones {
            let mut csv = String::from(MASK_LAYERS_CSV_HEADER);
            csv.push('\n');
            for (client, fractions) in layer_ones.iter().enumerate() {
                for (layer, frac) in fractions.iter().enumerate() {
                    let _ = writeln!(
                        csv,
                        "{t},{client},{layer},{frac},{}",
                        out.malicious_truth[client],
                    );
                }
            }
            write_file(&dir.join(format!("mask_layers_round_{t}.csv")), &csv)?;
        }
    }

    // Wall-clock timings are machine-dependent, so they live in their own
    // file, outside the determinism contract.
    let mut timing = String::from("round,wall_secs\n");
    for r in &out.records {
        let _ = writeln!(timing, "{},{:.6}", r.round, r.wall_secs);
    }
    let total: f64 = out.records.iter().map(|r| r.wall_secs).sum();
    let _ = writeln!(timing, "total,{total:.6}");
    write_file(&dir.join("timing.txt"), &timing)?;

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::run_experiment;

    fn tmp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("skymask-output-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn zero_rounds_gives_header_only_csv() {
        let cfg = ExperimentConfig::default();
        let out = ExperimentOutput {
            records: Vec::new(),
            reports: Vec::new(),
            malicious_truth: Vec::new(),
            final_global: crate::nn::ParamVector::zeros(
                crate::nn::LayerLayout::new(vec![(0, 1)]).unwrap(),
            ),
        };
        let dir = tmp_dir("empty");
        write_outputs(&dir, &cfg, &out).unwrap();
        let rounds = fs::read_to_string(dir.join("rounds.csv")).unwrap();
        assert_eq!(rounds, format!("{ROUNDS_CSV_HEADER}\n"));
        let summary = fs::read_to_string(dir.join("summary.json")).unwrap();
        assert!(summary.contains("\"final_accuracy\": null"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn summary_means_match_mean_rates_exactly() {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("dataset.train_n", "400"),
            ("dataset.test_n", "200"),
            ("partition.clients", "6"),
            ("fl.rounds", "2"),
            ("fl.local_iters", "2"),
            ("attack.kind", "fang-trim"),
            ("defense.kind", "skymask-nr"),
        ] {
            cfg.apply(k, v).unwrap();
        }
        let out = run_experiment(&cfg).unwrap();
        let dir = tmp_dir("means");
        write_outputs(&dir, &cfg, &out).unwrap();
        let text = fs::read_to_string(dir.join("summary.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        let (fpr, fnr) = mean_rates(&out.records);
        let got_fpr = parsed["mean_fpr"].as_f64().unwrap();
        let got_fnr = parsed["mean_fnr"].as_f64().unwrap();
        assert!((got_fpr - fpr.unwrap()).abs() < 1e-12);
        assert!((got_fnr - fnr.unwrap()).abs() < 1e-12);
        // Config echo is lossless.
        assert_eq!(parsed["config"]["partition"]["clients"].as_u64(), Some(6));
        assert_eq!(parsed["config"]["attack"]["kind"].as_str(), Some("fang-trim"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn column_schemas_are_pinned() {
        // Golden header strings; changing them breaks downstream plots.
        assert_eq!(
            ROUNDS_CSV_HEADER,
            "round,accuracy,attack_success_rate,fpr,fnr,benign_count,mask_iters"
        );
        assert_eq!(PCA_CSV_HEADER, "client_id,x,y,is_malicious_truth,verdict");
        assert_eq!(
            MASK_LAYERS_CSV_HEADER,
            "round,client_id,layer,ones_fraction,is_malicious_truth"
        );
    }

    #[test]
    fn detection_run_emits_per_round_dumps() {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("dataset.train_n", "400"),
            ("dataset.test_n", "200"),
            ("partition.clients", "6"),
            ("fl.rounds", "2"),
            ("fl.local_iters", "2"),
            ("attack.kind", "min-max"),
            ("defense.kind", "skymask"),
        ] {
            cfg.apply(k, v).unwrap();
        }
        let out = run_experiment(&cfg).unwrap();
        let dir = tmp_dir("dumps");
        write_outputs(&dir, &cfg, &out).unwrap();
        for t in 0..2 {
            let pca = fs::read_to_string(dir.join(format!("pca_round_{t}.csv"))).unwrap();
            assert!(pca.starts_with(PCA_CSV_HEADER));
            assert_eq!(pca.lines().count(), 1 + 6);
            let masks =
                fs::read_to_string(dir.join(format!("mask_layers_round_{t}.csv"))).unwrap();
            assert!(masks.starts_with(MASK_LAYERS_CSV_HEADER));
            // 6 clients x 2 layers.
            assert_eq!(masks.lines().count(), 1 + 12);
        }
        fs::remove_dir_all(&dir).ok();
    }
}
