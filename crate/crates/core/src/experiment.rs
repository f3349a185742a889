//! Runs a configured experiment and writes its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Map, Value};

use crate::config::{Mode, RunConfig};
use crate::dcr::{dcr_train, init_params, DcrConfig, DcrState, SamplingMode};
use crate::dii::{gamma_csv, init_dii, train_bilevel, DiiHistory, DiiState, Schedule, SingleNetTrainer, StepStats};
use crate::metrics::{dii_separation_auc, evaluate, histogram, EvalReport};
use crate::model::{HybridDataset, Instance, ModelLayout, ModelParams};
use crate::oracle::compare_influence_report;
use crate::synth::{generate_dataset, generate_test_split};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "step,sup_loss_primary,sup_loss_auxiliary,reg_loss,total_loss,eval_dice";

/// Files each mode writes, in a fixed order.
pub fn expected_files(mode: Mode) -> Vec<&'static str> {
    match mode {
        Mode::VerifyInfluence => vec![
            "config.txt",
            "run.log",
            "influence.csv",
            "influence_summary.json",
            "summary.json",
        ],
        m => {
            let mut files = vec![
                "config.txt",
                "run.log",
                "metrics.csv",
                "eval.json",
                "params.csv",
                "summary.json",
            ];
            if m.uses_dii() {
                files.extend(["gamma.csv", "histogram.csv", "dii_history.csv"]);
            }
            files
        }
    }
}

/// Everything a training run produces, before it is written to disk.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub params: ModelParams,
    pub dii: Option<DiiState>,
    pub history: DiiHistory,
    pub metrics_csv: String,
    pub eval: EvalReport,
    pub dataset: HybridDataset,
}

fn optional(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trains according to `cfg` without touching the filesystem.
pub fn train(cfg: &RunConfig) -> Result<TrainingOutcome> {
    if cfg.mode == Mode::VerifyInfluence {
        return Err(Error::InvalidArgument("verify-influence is not a training mode".into()));
    }
    let synth = cfg.synth_config();
    let dataset = generate_dataset(&synth)?;
    let test = generate_test_split(&synth, synth.test_count())?;
    let layout = ModelLayout::new(cfg.architecture.clone(), synth.channels, synth.classes)?;
    let schedule = Schedule {
        steps: cfg.steps,
        tau: cfg.tau,
        strong_batch_size: cfg.strong_batch_size,
        hessian: cfg.dii_hessian,
        record_gammas: false,
        seed: cfg.seed,
    };
    let mut dii = if cfg.mode.uses_dii() {
        Some(init_dii(dataset.weak.len(), cfg.gamma_init, cfg.adam())?)
    } else {
        None
    };

    let eval_every = cfg.eval_every();
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut observer = |t: usize, s: &StepStats, params: &ModelParams| -> Result<()> {
        let dice = if t.is_multiple_of(eval_every) || t == cfg.steps {
            Some(evaluate(params, &test)?.mean_dice())
        } else {
            None
        };
        writeln!(
            metrics,
            "{},{},{},{},{},{}",
            t,
            s.sup_primary,
            optional(s.sup_auxiliary),
            optional(s.reg),
            s.total,
            optional(dice)
        )
        .unwrap();
        Ok(())
    };

    let (params, history) = if cfg.mode.uses_dcr() {
        let dcr_cfg = DcrConfig {
            lambda: cfg.lambda,
            sgd: cfg.sgd(),
            batch_size: cfg.batch_size,
            sampling: SamplingMode::DiiMultinomial,
            seed: cfg.seed,
        };
        let state = DcrState::new(&layout, dcr_cfg)?;
        let (state, history) = dcr_train(&dataset, state, dii.as_mut(), &schedule, &mut observer)?;
        if state.fallback_draws > 0 {
            log::warn!("{} primary draws used the uniform fallback", state.fallback_draws);
        }
        (state.theta1, history)
    } else {
        let mut lower = SingleNetTrainer::new(
            init_params(&layout, cfg.seed),
            cfg.sgd(),
            cfg.batch_size,
            SamplingMode::Uniform,
            cfg.seed,
        );
        let history = train_bilevel(&dataset, &mut lower, dii.as_mut(), &schedule, cfg.batch_size, &mut observer)?;
        (lower.params, history)
    };
    let eval = evaluate(&params, &test)?;
    Ok(TrainingOutcome {
        params,
        dii,
        history,
        metrics_csv: metrics,
        eval,
        dataset,
    })
}

fn histogram_csv(gammas: &[f64], bins: usize) -> String {
    let mut s = String::from("bin_lower,bin_upper,count\n");
    for (b, count) in histogram(gammas, bins).iter().enumerate() {
        writeln!(s, "{},{},{}", b as f64 / bins as f64, (b + 1) as f64 / bins as f64, count).unwrap();
    }
    s
}

fn params_csv(params: &ModelParams) -> String {
    let mut s = String::from("index,value\n");
    for (i, v) in params.values.iter().enumerate() {
        writeln!(s, "{i},{v}").unwrap();
    }
    s
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable json");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn execute(cfg: &RunConfig, dir: &Path, log: &mut Vec<String>) -> Result<()> {
    match cfg.mode {
        Mode::VerifyInfluence => {
            let dataset = generate_dataset(&cfg.synth_config())?;
            let gammas = vec![cfg.gamma_init; dataset.weak.len()];
            let report = compare_influence_report(&dataset, &gammas, cfg.epsilon, cfg.l2)?;
            log.push(format!(
                "influence: {} instances, max relative error {:e}, rank correlation {:?}",
                report.rows.len(),
                report.max_rel_error,
                report.rank_correlation
            ));
            fs::write(dir.join("influence.csv"), report.to_csv())?;
            write_json(&dir.join("influence_summary.json"), &report.summary_json())?;
        }
        _ => {
            let out = train(cfg)?;
            log.push(format!("final test dice {}", out.eval.mean_dice()));
            fs::write(dir.join("metrics.csv"), &out.metrics_csv)?;
            write_json(&dir.join("eval.json"), &out.eval.to_json())?;
            fs::write(dir.join("params.csv"), params_csv(&out.params))?;
            if let Some(state) = &out.dii {
                log.push(format!("{} DII updates", state.steps()));
                fs::write(dir.join("gamma.csv"), gamma_csv(state, &out.dataset))?;
                fs::write(
                    dir.join("histogram.csv"),
                    histogram_csv(&state.gammas, cfg.histogram_bins),
                )?;
                fs::write(dir.join("dii_history.csv"), out.history.to_csv())?;
            }
        }
    }
    Ok(())
}

/// Runs `cfg` into `cfg.output_dir`. On failure the error is appended to
/// `run.log` before being returned.
pub fn run_experiment(cfg: &RunConfig) -> Result<Value> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut log = vec![format!("mode = {}", cfg.mode)];
    for note in cfg.notes() {
        log::info!("{note}");
        log.push(format!("note: {note}"));
    }
    let start = Instant::now();
    let result = execute(cfg, &dir, &mut log);
    log.push(format!("wall_clock_seconds = {}", start.elapsed().as_secs_f64()));
    if let Err(e) = &result {
        log.push(format!("error: {e}"));
    } else {
        log.push("status = complete".into());
    }
    let mut text = log.join("\n");
    text.push('\n');
    fs::write(dir.join("run.log"), text)?;
    result?;
    export_results(&dir)
}

fn read(dir: &Path, name: &str) -> Result<String> {
    fs::read_to_string(dir.join(name)).map_err(|_| Error::IncompleteRun(format!("{} lacks {name}", dir.display())))
}

fn read_json(dir: &Path, name: &str) -> Result<Value> {
    serde_json::from_str(&read(dir, name)?)
        .map_err(|e| Error::IncompleteRun(format!("{name} is not valid JSON: {e}")))
}

fn log_value(log: &str, key: &str) -> Option<String> {
    log.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.trim_start().strip_prefix('=')))
        .map(|v| v.trim().to_string())
}

/// Final evaluation Dice: the last non-empty `eval_dice` of `metrics.csv`.
pub fn last_eval_dice(metrics_csv: &str) -> Option<f64> {
    metrics_csv
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next())
        .filter(|v| !v.is_empty())
        .last()
        .and_then(|v| v.parse().ok())
}

/// Builds and writes `summary.json` for a completed run directory.
pub fn export_results(dir: &Path) -> Result<Value> {
    let log = read(dir, "run.log")?;
    if log_value(&log, "status").as_deref() != Some("complete") {
        return Err(Error::IncompleteRun(format!("{} did not finish", dir.display())));
    }
    let mode: Mode = log_value(&log, "mode")
        .and_then(|m| m.parse().ok())
        .ok_or_else(|| Error::IncompleteRun("run.log lacks the mode".into()))?;
    let mut summary = Map::new();
    summary.insert("mode".into(), json!(mode.as_str()));
    if let Some(secs) = log_value(&log, "wall_clock_seconds").and_then(|s| s.parse::<f64>().ok()) {
        summary.insert("wall_clock_seconds".into(), json!(secs));
    }
    if mode == Mode::VerifyInfluence {
        let influence = read_json(dir, "influence_summary.json")?;
        summary.insert("influence".into(), influence);
    } else {
        let metrics = read(dir, "metrics.csv")?;
        let dice = last_eval_dice(&metrics)
            .ok_or_else(|| Error::IncompleteRun("metrics.csv has no evaluation rows".into()))?;
        let eval = read_json(dir, "eval.json")?;
        summary.insert("final_dice".into(), json!(dice));
        summary.insert("final_assd".into(), eval["assd.mean"].clone());
        summary.insert("assd_undefined_count".into(), eval["assd_undefined_count"].clone());
        if mode.uses_dii() {
            let gamma = read(dir, "gamma.csv")?;
            let mut gammas = Vec::new();
            let mut flags = Vec::new();
            for line in gamma.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                let parsed = (f.len() == 3)
                    .then(|| Some((f[1].parse::<f64>().ok()?, f[2] == "1")))
                    .flatten()
                    .ok_or_else(|| Error::IncompleteRun(format!("bad gamma.csv row {line:?}")))?;
                gammas.push(parsed.0);
                flags.push(parsed.1);
            }
            let m = gammas.len().max(1) as f64;
            let mut sorted = gammas.clone();
            sorted.sort_by(f64::total_cmp);
            let median = if sorted.is_empty() {
                0.0
            } else if sorted.len() % 2 == 1 {
                sorted[sorted.len() / 2]
            } else {
                0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
            };
            summary.insert(
                "gamma".into(),
                json!({
                    "mean": gammas.iter().sum::<f64>() / m,
                    "median": median,
                    "frac_below_0.1": gammas.iter().filter(|&&g| g < 0.1).count() as f64 / m,
                    "frac_above_0.9": gammas.iter().filter(|&&g| g > 0.9).count() as f64 / m,
                }),
            );
            summary.insert("separation_auc".into(), json!(dii_separation_auc(&gammas, &flags)));
        }
    }
    let value = Value::Object(summary);
    write_json(&dir.join("summary.json"), &value)?;
    Ok(value)
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, f64)>) {
    match value {
        Value::Number(n) => out.push((prefix.to_string(), n.as_f64().unwrap_or(f64::NAN))),
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {}
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricDelta {
    pub key: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

/// Numeric summary fields present in both runs, with `b − a`.
pub fn compare_runs(a: &Path, b: &Path) -> Result<Vec<MetricDelta>> {
    let (sa, sb) = (export_results(a)?, export_results(b)?);
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    flatten("", &sa, &mut fa);
    flatten("", &sb, &mut fb);
    Ok(fa
        .into_iter()
        .filter_map(|(key, va)| {
            let vb = fb.iter().find(|(k, _)| *k == key)?.1;
            Some(MetricDelta {
                delta: vb - va,
                key,
                a: va,
                b: vb,
            })
        })
        .collect())
}

/// Lists files in a run directory, sorted.
pub fn run_files(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    Ok(names)
}

/// Test-split instances for a configuration, as used for evaluation.
pub fn test_split(cfg: &RunConfig) -> Result<Vec<Instance>> {
    let synth = cfg.synth_config();
    generate_test_split(&synth, synth.test_count())
}
