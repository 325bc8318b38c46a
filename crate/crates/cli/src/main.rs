//! `tdslab`: generate span datasets, train, evaluate, profile drift and compare methods.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use tds_core::config::KvConfig;
use tds_core::dataset::format::MANIFEST_FILE;
use tds_core::dataset::Manifest;
use tds_core::error::{Error, Result};
use tds_core::eval::drift_profile;
use tds_core::generator::{generate_dataset, GeneratorConfig};
use tds_core::model::TwinTower;
use tds_core::nn::Checkpoint;
use tds_core::trainer::{
    check_future_blind, evaluate, train_incremental, Method, RunLog, TrainConfig, TrainOptions,
    FINAL_CHECKPOINT, RUNLOG_FILE, TRAIN_CONFIG_FILE,
};

const ECHO_FILE: &str = "config_echo.txt";
const INCOMPLETE_FILE: &str = "INCOMPLETE";

#[derive(Parser)]
#[command(name = "tdslab", version, about = "Temporal distribution shift lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a span-partitioned synthetic dataset.
    Gen(GenArgs),
    /// Train incrementally over every span of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one span.
    Eval(EvalArgs),
    /// Per-feature CV and JSD tables across spans.
    Drift(DriftArgs),
    /// Train several methods over several seeds and report deltas against a baseline.
    Compare(CompareArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<KvConfig> {
        let mut c = match &self.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        for o in &self.overrides {
            c.apply_override(o)?;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a span checkpoint of an earlier run with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after training this span.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory written by `train`; its config fixes the model shape.
    #[arg(long)]
    run: PathBuf,
    /// Defaults to the run's final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to the last span.
    #[arg(long)]
    span: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DriftArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated methods; must include the baseline.
    #[arg(long, value_delimiter = ',', required = true)]
    methods: Vec<Method>,
    /// Number of training seeds, starting at 0.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value = "erm")]
    baseline: Method,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let out = match &cli.command {
        Command::Gen(a) => &a.out,
        Command::Train(a) => &a.out,
        Command::Eval(a) => &a.out,
        Command::Drift(a) => &a.out,
        Command::Compare(a) => &a.out,
    }
    .clone();
    let result = std::fs::create_dir_all(&out)
        .map_err(|e| Error::Input(format!("creating {}: {e}", out.display())))
        .and_then(|()| {
            let _ = std::fs::remove_file(out.join(INCOMPLETE_FILE));
            match cli.command {
                Command::Gen(a) => gen(&a),
                Command::Train(a) => train(&a),
                Command::Eval(a) => eval(&a),
                Command::Drift(a) => drift(&a),
                Command::Compare(a) => compare(&a),
            }
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tdslab: {e}");
            let _ = std::fs::write(out.join(INCOMPLETE_FILE), format!("{e}\n"));
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

/// Tool version, command, schema hash and resolved configuration.
fn write_echo(out: &Path, command: &str, schema_hash: Option<u64>, config: &KvConfig) -> Result<()> {
    let mut text = format!("tool=tdslab {}\ncommand={command}\n", env!("CARGO_PKG_VERSION"));
    if let Some(h) = schema_hash {
        text += &format!("schema_hash={h:016x}\n");
    }
    text += &config.to_text();
    write(&out.join(ECHO_FILE), text.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Input(format!("writing {}: {e}", path.display())))
}

fn load_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::load(&dir.join(MANIFEST_FILE))
}

fn gen(a: &GenArgs) -> Result<()> {
    let mut kv = a.config.resolve()?;
    if let Some(s) = a.seed {
        kv.set("seed", s);
    }
    let cfg = GeneratorConfig::from_kv(&kv)?;
    let manifest = generate_dataset(cfg.clone(), &a.out)?;
    write_echo(&a.out, "gen", Some(manifest.schema.hash()), &cfg.to_kv())
}

fn train_config(c: &ConfigArgs, method: Option<Method>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut kv = c.resolve()?;
    if let Some(m) = method {
        kv.set("method", m);
    }
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    TrainConfig::from_kv(&kv)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(&a.config, a.method, a.seed)?;
    let manifest = load_manifest(&a.data)?;
    let resume = a
        .resume
        .as_ref()
        .map(|p| Checkpoint::load(p, None))
        .transpose()?;
    let outcome = train_incremental(
        &manifest,
        &cfg,
        &TrainOptions {
            out_dir: Some(a.out.clone()),
            resume,
            stop_after_span: a.stop_after,
        },
    )?;
    write_echo(&a.out, "train", Some(outcome.model.schema_hash()), &cfg.to_kv())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let cfg = TrainConfig::from_kv(&KvConfig::load(&a.run.join(TRAIN_CONFIG_FILE))?)?;
    let mut model = TwinTower::new(&manifest.schema, &cfg.tower, cfg.adam(), cfg.seed)?;
    let ck_path = a.checkpoint.clone().unwrap_or_else(|| a.run.join(FINAL_CHECKPOINT));
    let ck = Checkpoint::load(&ck_path, Some(model.schema_hash()))?;
    ck.restore_into(&mut model.store)?;
    let span = a.span.unwrap_or(manifest.n_spans() - 1);
    check_future_blind(&ck, span as u32)?;
    let report = evaluate(&model, &manifest.load_span(span)?, &cfg)?;
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write(&a.out.join(format!("eval_span_{span:03}.json")), text.as_bytes())?;
    let mut echo = cfg.to_kv();
    echo.set(
        "eval.checkpoint",
        ck_path.file_name().map_or_else(|| ck_path.display().to_string(), |f| f.to_string_lossy().into_owned()),
    );
    echo.set("eval.data_seed", manifest.seed);
    echo.set("eval.span", span);
    write_echo(&a.out, "eval", Some(model.schema_hash()), &echo)
}

fn ndjson<T: serde::Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out += &serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        out.push('\n');
    }
    Ok(out)
}

fn drift(a: &DriftArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let spans = (0..manifest.n_spans())
        .map(|t| manifest.load_span(t))
        .collect::<Result<Vec<_>>>()?;
    let report = drift_profile(&manifest.schema, &spans)?;
    write(&a.out.join("drift.ndjson"), ndjson(&report.rows)?.as_bytes())?;
    write(&a.out.join("drift_cv.ndjson"), ndjson(&report.cv)?.as_bytes())?;
    let mut echo = KvConfig::new();
    echo.set("drift.data_seed", manifest.seed);
    echo.set("drift.spans", manifest.n_spans());
    write_echo(&a.out, "drift", Some(manifest.schema.hash()), &echo)
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per (method, span, metric): the paired per-seed delta against the baseline.
fn delta_rows(logs: &BTreeMap<(Method, u64), RunLog>, methods: &[Method], baseline: Method, seeds: u64) -> Vec<serde_json::Value> {
    let base_log = |s: u64| &logs[&(baseline, s)];
    let mut keys: Vec<(u32, String)> = base_log(0)
        .records()
        .iter()
        .map(|r| (r.span, r.metric.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    let mut rows = Vec::new();
    for &m in methods.iter().filter(|&&m| m != baseline) {
        for (span, metric) in &keys {
            let mut deltas = Vec::new();
            let mut base = Vec::new();
            let mut cand = Vec::new();
            for s in 0..seeds {
                if let (Some(b), Some(c)) = (base_log(s).get(*span, metric), logs[&(m, s)].get(*span, metric)) {
                    deltas.push(c - b);
                    base.push(b);
                    cand.push(c);
                }
            }
            if deltas.is_empty() {
                continue;
            }
            let (mean_delta, std_delta) = mean_std(&deltas);
            let (base_mean, _) = mean_std(&base);
            let (method_mean, _) = mean_std(&cand);
            let relative = (base_mean != 0.0).then(|| mean_delta / base_mean.abs());
            rows.push(json!({
                "span": span,
                "metric": metric,
                "method": m.name(),
                "baseline": baseline.name(),
                "seeds": deltas.len(),
                "baseline_mean": base_mean,
                "method_mean": method_mean,
                "mean_delta": mean_delta,
                "std_delta": std_delta,
                "relative_delta": relative,
            }));
        }
    }
    rows
}

fn compare(a: &CompareArgs) -> Result<()> {
    if !a.methods.contains(&a.baseline) {
        return Err(Error::Config(format!("--methods must include the baseline {}", a.baseline)));
    }
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let mut methods = a.methods.clone();
    methods.dedup();
    let base_cfg = train_config(&a.config, None, None)?;
    let manifest = load_manifest(&a.data)?;
    let jobs: Vec<(Method, u64)> = methods.iter().flat_map(|&m| (0..a.seeds).map(move |s| (m, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(m, s)| {
            let cfg = TrainConfig {
                method: m,
                seed: s,
                ..base_cfg.clone()
            };
            let dir = a.out.join(m.name()).join(format!("seed_{s}"));
            let outcome = train_incremental(
                &manifest,
                &cfg,
                &TrainOptions {
                    out_dir: Some(dir.clone()),
                    ..TrainOptions::default()
                },
            )?;
            write_echo(&dir, "train", Some(outcome.model.schema_hash()), &cfg.to_kv())?;
            Ok(((m, s), outcome.log))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut joined = RunLog::new();
    for (_, log) in &runs {
        joined.extend(log);
    }
    write(&a.out.join(RUNLOG_FILE), joined.to_ndjson().as_bytes())?;
    let logs: BTreeMap<(Method, u64), RunLog> = runs.into_iter().collect();
    let rows = delta_rows(&logs, &methods, a.baseline, a.seeds);
    write(&a.out.join("compare.ndjson"), ndjson(&rows)?.as_bytes())?;

    let mut echo = base_cfg.to_kv();
    echo.set("compare.methods", methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","));
    echo.set("compare.seeds", a.seeds);
    echo.set("compare.baseline", a.baseline);
    write_echo(&a.out, "compare", Some(manifest.schema.hash()), &echo)
}
