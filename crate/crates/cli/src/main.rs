//! Command-line runner for the federated-learning simulator.
//!
//! Subcommands:
//! - `run   --config FILE [--seed S] [--out DIR]`: one experiment.
//! - `sweep --config FILE --param KEY --values V1,V2,... [--seed S] [--out DIR]`:
//!   one experiment per value, each in its own `KEY=VALUE` subdirectory.
//!
//! Exit code 0 on success, 2 on usage errors, 1 on runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use skymask_core::config::{load_config, ExperimentConfig};
use skymask_core::output::write_outputs;
use skymask_core::runner::{mean_attack_success, mean_rates, run_experiment};

const USAGE: &str = "\
skymask - federated-learning simulator with mask-based update filtering

USAGE:
  skymask run   --config FILE [--seed S] [--out DIR]
  skymask sweep --config FILE --param KEY --values V1,V2,... [--seed S] [--out DIR]

SUBCOMMANDS:
  run     Run one experiment and write rounds.csv, summary.json, and
          per-round detection dumps into the output directory.
  sweep   Run the experiment once per value of KEY; outputs land in
          <out>/<KEY>=<VALUE>/.

OPTIONS:
  --config FILE   Flat `key = value` config file (empty file = defaults).
  --seed S        Override the config seed.
  --out DIR       Override the config output directory.
  --param KEY     Config key to sweep (e.g. attack.fraction).
  --values LIST   Comma-separated values for KEY.
";

struct Args {
    command: String,
    config: Option<PathBuf>,
    seed: Option<String>,
    out: Option<PathBuf>,
    param: Option<String>,
    values: Option<String>,
}

fn parse_args(mut argv: std::env::Args) -> Result<Args, String> {
    let _bin = argv.next();
    let command = argv.next().ok_or("missing subcommand")?;
    let mut args = Args {
        command,
        config: None,
        seed: None,
        out: None,
        param: None,
        values: None,
    };
    while let Some(flag) = argv.next() {
        let mut take = |name: &str| {
            argv.next()
                .ok_or_else(|| format!("{name} requires a value"))
        };
        match flag.as_str() {
            "--config" => args.config = Some(PathBuf::from(take("--config")?)),
            "--seed" => args.seed = Some(take("--seed")?),
            "--out" => args.out = Some(PathBuf::from(take("--out")?)),
            "--param" => args.param = Some(take("--param")?),
            "--values" => args.values = Some(take("--values")?),
            other => return Err(format!("unknown option `{other}`")),
        }
    }
    Ok(args)
}

fn load_with_overrides(args: &Args) -> Result<ExperimentConfig, String> {
    let path = args.config.as_ref().ok_or("--config is required")?;
    let mut cfg = load_config(path).map_err(|e| e.to_string())?;
    if let Some(seed) = &args.seed {
        cfg.apply("seed", seed).map_err(|e| e.to_string())?;
    }
    if let Some(out) = &args.out {
        cfg.apply("output_dir", &out.display().to_string())
            .map_err(|e| e.to_string())?;
    }
    Ok(cfg)
}

fn run_one(cfg: &ExperimentConfig, dir: &Path) -> Result<(), String> {
    let output = run_experiment(cfg).map_err(|e| e.to_string())?;
    write_outputs(dir, cfg, &output).map_err(|e| e.to_string())?;
    let last = output.records.last();
    let (fpr, fnr) = mean_rates(&output.records);
    let asr = mean_attack_success(&output.records);
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} | rounds={} accuracy={} mean_fpr={} mean_fnr={} mean_attack_success={}",
        dir.display(),
        output.records.len(),
        last.map_or("-".to_string(), |r| format!("{:.4}", r.accuracy)),
        fmt(fpr),
        fmt(fnr),
        fmt(asr),
    );
    Ok(())
}

fn main() -> ExitCode {
    let args = match parse_args(std::env::args()) {
        Ok(args) => args,
        Err(message) => {
            eprintln!("error: {message}\n\n{USAGE}");
            return ExitCode::from(2);
        }
    };

    let result = match args.command.as_str() {
        "run" => load_with_overrides(&args).and_then(|cfg| {
            let dir = PathBuf::from(&cfg.output_dir);
            run_one(&cfg, &dir)
        }),
        "sweep" => load_with_overrides(&args).and_then(|cfg| {
            let param = args.param.as_ref().ok_or("--param is required for sweep")?;
            let values = args.values.as_ref().ok_or("--values is required for sweep")?;
            if values.trim().is_empty() {
                return Err("--values must not be empty".into());
            }
            let base = PathBuf::from(&cfg.output_dir);
            for value in values.split(',') {
                let value = value.trim();
                let mut swept = cfg.clone();
                swept
                    .apply(param, value)
                    .and_then(|()| swept.validate())
                    .map_err(|e| e.to_string())?;
                let dir = base.join(format!("{param}={value}"));
                run_one(&swept, &dir)?;
            }
            Ok(())
        }),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        other => {
            eprintln!("error: unknown subcommand `{other}`\n\n{USAGE}");
            return ExitCode::from(2);
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
