use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{train_step, RunLog, RunRecord, StepLosses, TrainConfig};
use crate::augment::make_views;
use crate::dataset::{batch_iter, full_batch, BatchOptions, FeatureSchema, Manifest, SampleBatch, Side, SpanDataset};
use crate::error::{Error, Result};
use crate::eval::{collapse_probe, metric_report, CollapseReport, MetricReport};
use crate::model::TwinTower;
use crate::nn::{Checkpoint, Matrix, RngState};

pub const RUNLOG_FILE: &str = "runlog.ndjson";
/// Wall-clock timings live outside the run log so the log stays reproducible.
pub const TIMING_FILE: &str = "timing.jsonl";
pub const TRAIN_CONFIG_FILE: &str = "train_config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Batch index reserved for the augmented views used by the collapse probe.
const PROBE_BATCH: u64 = u64::MAX;

/// Chronological spans to train on.
pub trait SpanSource {
    fn schema(&self) -> &FeatureSchema;
    fn n_spans(&self) -> usize;
    fn span(&self, t: usize) -> Result<Cow<'_, SpanDataset>>;
}

impl SpanSource for Manifest {
    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn n_spans(&self) -> usize {
        Manifest::n_spans(self)
    }

    fn span(&self, t: usize) -> Result<Cow<'_, SpanDataset>> {
        self.load_span(t).map(Cow::Owned)
    }
}

struct InMemory<'a> {
    schema: &'a FeatureSchema,
    spans: &'a [SpanDataset],
}

impl SpanSource for InMemory<'_> {
    fn schema(&self) -> &FeatureSchema {
        self.schema
    }

    fn n_spans(&self) -> usize {
        self.spans.len()
    }

    fn span(&self, t: usize) -> Result<Cow<'_, SpanDataset>> {
        let s = self
            .spans
            .get(t)
            .ok_or_else(|| Error::Input(format!("no span {t}")))?;
        if s.span as usize != t {
            return Err(Error::Input(format!("span at position {t} is labelled {}", s.span)));
        }
        Ok(Cow::Borrowed(s))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write the run log, timings, config echo and checkpoints.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after training this span (used to exercise resume).
    pub stop_after_span: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    pub model: TwinTower,
    pub checkpoint: Checkpoint,
    /// Per trained span: how often each record fed a gradient update.
    pub visits: Vec<(u32, Vec<u32>)>,
    pub reports: Vec<MetricReport>,
    pub steps: u64,
}

pub fn checkpoint_file(span: usize) -> String {
    format!("span_{span:03}.ckpt")
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn config_hash(config: &TrainConfig) -> String {
    format!("{:016x}", fnv1a(&config.to_kv().to_text()))
}

fn lineage(ck: &Checkpoint) -> Result<Vec<u32>> {
    let text = ck
        .meta
        .get("trained_spans")
        .ok_or_else(|| Error::Format("checkpoint has no trained_spans lineage".into()))?;
    text.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Format(format!("bad lineage entry {s:?}"))))
        .collect()
}

/// Fails unless every span in the checkpoint's lineage precedes `eval_span`.
pub fn check_future_blind(ck: &Checkpoint, eval_span: u32) -> Result<()> {
    match lineage(ck)?.into_iter().find(|&s| s >= eval_span) {
        Some(s) => Err(Error::Input(format!(
            "checkpoint was trained on span {s} and cannot be evaluated on span {eval_span}"
        ))),
        None => Ok(()),
    }
}

/// Within-sample view variance and probe error of the encoder means, summed over sides.
pub fn collapse_diagnostics(model: &TwinTower, batch: &SampleBatch, config: &TrainConfig) -> Result<Option<CollapseReport>> {
    let n = batch.len().min(config.probe_rows);
    if n < crate::eval::collapse::HOLDOUT_EVERY || config.augment.j < 2 {
        return Ok(None);
    }
    let sub = batch.select(&(0..n).collect::<Vec<_>>());
    let views = make_views(&model.schema, &sub, &config.augment_config(), PROBE_BATCH)?;
    let mut total = CollapseReport {
        view_variance: 0.0,
        total_variance: 0.0,
        probe_error: 0.0,
        target_variance: 0.0,
    };
    for side in Side::BOTH {
        let e = model.tower(side).embed(&model.store, &sub)?;
        let mus = views
            .views
            .iter()
            .map(|v| model.encode(side, v).map(|enc| enc.mu))
            .collect::<Result<Vec<Matrix>>>()?;
        let r = collapse_probe(&mus, &e)?;
        total.view_variance += r.view_variance;
        total.total_variance += r.total_variance;
        total.probe_error += r.probe_error;
        total.target_variance += r.target_variance;
    }
    Ok(Some(total))
}

/// Deterministic AUC/GAUC (and collapse diagnostics) of `model` on one span.
pub fn evaluate(model: &TwinTower, span: &SpanDataset, config: &TrainConfig) -> Result<MetricReport> {
    let batch = full_batch(&model.schema, span);
    let p = model.infer(&batch)?;
    let mut report = metric_report(span.span, &p.probs, &batch.labels, &batch.group_ids)?;
    report.collapse = collapse_diagnostics(model, &batch, config)?;
    Ok(report)
}

fn report_records(report: &MetricReport, config: &TrainConfig) -> Vec<RunRecord> {
    let rec = |metric: String, value: f64| RunRecord {
        span: report.span,
        method: config.method.name().into(),
        seed: config.seed,
        metric,
        value,
    };
    let mut out = Vec::new();
    for t in &report.tasks {
        out.push(rec(format!("auc.task{}", t.task), t.auc));
        out.push(rec(format!("gauc.task{}", t.task), t.gauc));
        out.push(rec(format!("gauc_groups.task{}", t.task), t.groups_used as f64));
        out.push(rec(format!("gauc_skipped.task{}", t.task), t.groups_skipped as f64));
    }
    if let Some(c) = &report.collapse {
        out.push(rec("view_variance".into(), c.view_variance));
        out.push(rec("probe_error".into(), c.probe_error));
        out.push(rec("rel_view_variance".into(), c.relative_view_variance()));
        out.push(rec("rel_probe_error".into(), c.relative_probe_error()));
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Single pass over spans `0..n−1` of an in-memory dataset; see [`train_incremental`].
pub fn train_on_spans(schema: &FeatureSchema, spans: &[SpanDataset], config: &TrainConfig, opts: &TrainOptions) -> Result<RunOutcome> {
    train_incremental(&InMemory { schema, spans }, config, opts)
}

/// Trains once on each span `t = 0..n−2` in order and, after each, evaluates
/// on span `t+1`. The last span is never trained on. One optimizer persists
/// across spans; a checkpoint with its lineage is produced after every span.
pub fn train_incremental<S: SpanSource + ?Sized>(source: &S, config: &TrainConfig, opts: &TrainOptions) -> Result<RunOutcome> {
    config.validate()?;
    let n = source.n_spans();
    if n < 2 {
        return Err(Error::Config("incremental training needs at least 2 spans".into()));
    }
    let schema = source.schema();
    let mut model = TwinTower::new(schema, &config.tower, config.adam(), config.seed)?;
    let hash = model.schema_hash();
    let chash = config_hash(config);

    let mut start = 0;
    let mut step = 0;
    let mut trained: Vec<u32> = Vec::new();
    let mut last_ckpt = None;
    if let Some(ck) = &opts.resume {
        if ck.schema_hash != hash {
            return Err(Error::Format(format!(
                "checkpoint schema hash {:016x} does not match model {hash:016x}",
                ck.schema_hash
            )));
        }
        if ck.meta.get("config_hash") != Some(&chash) {
            return Err(Error::Config("checkpoint was written under a different training config".into()));
        }
        ck.restore_into(&mut model.store)?;
        start = ck.rng.next_span as usize;
        step = ck.rng.step;
        trained = lineage(ck)?;
        last_ckpt = Some(ck.clone());
    }

    let last_train = n - 2;
    let end = opts.stop_after_span.map_or(last_train, |s| s.min(last_train));
    if let Some(dir) = &opts.out_dir {
        let ck_dir = dir.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(format!("creating {}", ck_dir.display()), e))?;
        write_file(&dir.join(TRAIN_CONFIG_FILE), config.to_kv().to_text().as_bytes())?;
        if opts.resume.is_none() {
            write_file(&dir.join(RUNLOG_FILE), b"")?;
            write_file(&dir.join(TIMING_FILE), b"")?;
        }
    }

    let batch_opts = BatchOptions {
        batch_size: config.batch_size,
        shuffle_seed: config.seed,
        listwise: config.weights.listwise,
    };
    let mut log = RunLog::new();
    let mut visits = Vec::new();
    let mut reports = Vec::new();
    let mut prefetched: Option<Cow<'_, SpanDataset>> = None;
    for t in start..=end {
        let timer = Instant::now();
        let span = match prefetched.take() {
            Some(s) => s,
            None => source.span(t)?,
        };
        let mut counts = vec![0u32; span.records.len()];
        let mut sums = [0.0; 6];
        for (b, batch) in batch_iter(schema, &span, batch_opts)?.enumerate() {
            for &r in &batch.record_ids {
                counts[r] += 1;
            }
            let l: StepLosses = train_step(&mut model, &batch, config, b as u64, step)?;
            for (s, v) in sums.iter_mut().zip(l.values()) {
                *s += v * batch.len() as f64;
            }
            step += 1;
        }
        trained.push(t as u32);
        let train_seconds = timer.elapsed().as_secs_f64();

        let mut records = Vec::new();
        let n_rec = span.records.len().max(1) as f64;
        for (name, s) in StepLosses::NAMES.iter().zip(sums) {
            records.push(RunRecord {
                span: t as u32,
                method: config.method.name().into(),
                seed: config.seed,
                metric: format!("train.{name}"),
                value: s / n_rec,
            });
        }
        records.push(RunRecord {
            span: t as u32,
            method: config.method.name().into(),
            seed: config.seed,
            metric: "train.records".into(),
            value: counts.iter().map(|&c| f64::from(c)).sum(),
        });

        let meta = BTreeMap::from([
            ("method".to_owned(), config.method.name().to_owned()),
            ("seed".to_owned(), config.seed.to_string()),
            ("config_hash".to_owned(), chash.clone()),
            ("trained_spans".to_owned(), trained.iter().map(u32::to_string).collect::<Vec<_>>().join(",")),
        ]);
        let ckpt = Checkpoint::from_store(
            &model.store,
            hash,
            RngState {
                seed: config.seed,
                next_span: t as u64 + 1,
                step,
            },
            meta,
        );

        if config.eval_every_span || t == end {
            let eval_span = source.span(t + 1)?;
            check_future_blind(&ckpt, eval_span.span)?;
            let report = evaluate(&model, &eval_span, config)?;
            records.extend(report_records(&report, config));
            reports.push(report);
            prefetched = Some(eval_span);
        }
        for r in &records {
            log.push(r.clone())?;
        }
        if let Some(dir) = &opts.out_dir {
            ckpt.save(&dir.join(CHECKPOINT_DIR).join(checkpoint_file(t)))?;
            RunLog::append_to(&dir.join(RUNLOG_FILE), &records)?;
            let timing = serde_json::json!({ "span": t, "train_seconds": train_seconds });
            let mut line = timing.to_string();
            line.push('\n');
            append_text(&dir.join(TIMING_FILE), &line)?;
        }
        visits.push((t as u32, counts));
        last_ckpt = Some(ckpt);
    }

    let checkpoint = last_ckpt.ok_or_else(|| Error::Config("nothing to train: resume point is past the last training span".into()))?;
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(RunOutcome {
        log,
        model,
        checkpoint,
        visits,
        reports,
        steps: step,
    })
}

fn append_text(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(format!("appending to {}", path.display()), e))
}
