//! Benchmark runner: every method over every labelled instance, then metrics and report files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, ConfusionMatrix, Metrics};
use crate::baselines::Method;
use crate::config::RunConfig;
use crate::der::{PredictionResult, Providers};
use crate::error::{Error, Result};
use crate::model::{format_timestamp, PredictionInstance, Timestamp};
use crate::pipeline::{baseline_index, predict};
use crate::store::Cohort;
use crate::tasks::TaskSpec;

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";
pub const METADATA_JSON: &str = "run_metadata.json";
pub const PREDICTIONS_DIR: &str = "predictions";

/// An instance a method could not score. Excluded from that method's matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedInstance {
    pub method: String,
    pub subject_id: String,
    pub prediction_time: Timestamp,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub scored: usize,
    pub skipped: usize,
    pub metrics: Option<Metrics>,
    pub confusion: ConfusionMatrix,
}

/// The deterministic part of a run: identical inputs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task_id: String,
    pub labels: Vec<i64>,
    pub instances: usize,
    pub methods: Vec<MethodReport>,
    pub skipped: Vec<SkippedInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub task_id: String,
    pub methods: Vec<String>,
    pub instances: usize,
    pub workers: usize,
    pub seeds: BTreeMap<String, u64>,
    pub chat_fingerprint: String,
    pub embedder_fingerprint: String,
    pub config: RunConfig,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub metrics: MetricsReport,
    pub metadata: RunMetadata,
    /// Per method, in instance order.
    pub predictions: Vec<(Method, Vec<PredictionResult>)>,
}

/// Score one method's predictions. Predictions without a usable true label
/// become skipped entries.
pub fn score_method(
    method: &str,
    task: &TaskSpec,
    predictions: &[PredictionResult],
) -> (MethodReport, Vec<SkippedInstance>) {
    let mut matrix = ConfusionMatrix::new(&task.label_values);
    let mut skipped = Vec::new();
    let mut scored = 0;
    for p in predictions {
        let outcome = match p.true_label {
            None => Err("no true label".to_string()),
            Some(t) => matrix.add(t, p.predicted_label).map_err(|e| e.to_string()),
        };
        match outcome {
            Ok(()) => scored += 1,
            Err(reason) => skipped.push(SkippedInstance {
                method: method.into(),
                subject_id: p.subject_id.clone(),
                prediction_time: p.prediction_time,
                reason,
            }),
        }
    }
    let metrics = compute_metrics(&matrix).ok();
    let report = MethodReport {
        method: method.into(),
        scored,
        skipped: skipped.len(),
        metrics,
        confusion: matrix,
    };
    (report, skipped)
}

fn skip(method: Method, inst: &PredictionInstance, reason: String) -> SkippedInstance {
    SkippedInstance {
        method: method.as_str().into(),
        subject_id: inst.subject_id.clone(),
        prediction_time: inst.prediction_time,
        reason,
    }
}

type InstanceOutcome = Vec<std::result::Result<PredictionResult, SkippedInstance>>;

/// Fan instances out over `workers` threads; results come back in instance order.
pub fn run_benchmark(
    cohort: &Cohort,
    task: &TaskSpec,
    methods: &[Method],
    config: &RunConfig,
    providers: &Providers<'_>,
) -> Result<BenchReport> {
    config.validate()?;
    task.validate()?;
    if cohort.labels.is_empty() {
        return Err(Error::Data("benchmark needs at least one labelled instance".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    if let Some(i) = cohort.labels.iter().find(|i| i.true_label.is_none()) {
        return Err(Error::Data(format!("instance for {} has no label", i.subject_id)));
    }
    let started = Instant::now();
    let by_id: HashMap<&str, usize> = cohort
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.subject_id.as_str(), i))
        .collect();
    let workers = config.runtime.effective_workers();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let per_instance: Vec<InstanceOutcome> = pool.install(|| {
        cohort
            .labels
            .par_iter()
            .map(|inst| {
                let Some(&ri) = by_id.get(inst.subject_id.as_str()) else {
                    return methods
                        .iter()
                        .map(|&m| Err(skip(m, inst, "subject not in cohort".into())))
                        .collect();
                };
                let record = &cohort.records[ri];
                let shared = if methods.iter().any(|m| m.uses_index() && *m != Method::EhrRag) {
                    Some(baseline_index(record, inst, config, providers))
                } else {
                    None
                };
                methods
                    .iter()
                    .map(|&m| {
                        let index = match &shared {
                            Some(Ok(ix)) => Some(ix),
                            Some(Err(e)) if m.uses_index() && m != Method::EhrRag => {
                                return Err(skip(m, inst, format!("index: {e}")))
                            }
                            _ => None,
                        };
                        predict(m, record, inst, task, config, providers, index)
                            .map_err(|e| skip(m, inst, e.to_string()))
                    })
                    .collect()
            })
            .collect()
    });

    let mut predictions: Vec<(Method, Vec<PredictionResult>)> =
        methods.iter().map(|&m| (m, Vec::new())).collect();
    let mut skipped = Vec::new();
    for outcome in per_instance {
        for (slot, r) in predictions.iter_mut().zip(outcome) {
            match r {
                Ok(p) => slot.1.push(p),
                Err(s) => skipped.push(s),
            }
        }
    }
    let mut rows = Vec::with_capacity(methods.len());
    for (m, preds) in &predictions {
        let (mut row, extra) = score_method(m.as_str(), task, preds);
        row.skipped += skipped.iter().filter(|s| s.method == m.as_str()).count();
        skipped.extend(extra);
        rows.push(row);
    }

    let mut seeds = BTreeMap::new();
    seeds.insert("uniform_sampling".to_string(), config.baselines.seed);
    let metadata = RunMetadata {
        task_id: task.task_id.clone(),
        methods: methods.iter().map(|m| m.as_str().to_string()).collect(),
        instances: cohort.labels.len(),
        workers,
        seeds,
        chat_fingerprint: providers.gateway.fingerprint(),
        embedder_fingerprint: providers.embedder.fingerprint(),
        config: config.clone(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(BenchReport {
        metrics: MetricsReport {
            task_id: task.task_id.clone(),
            labels: task.label_values.clone(),
            instances: cohort.labels.len(),
            methods: rows,
            skipped,
        },
        metadata,
        predictions,
    })
}

/// Fixed-width table, one row per method.
pub fn render_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "task: {}  instances: {}", report.task_id, report.instances);
    let mut header = format!("{:<10} {:>6} {:>7} {:>9} {:>9}", "method", "scored", "skipped", "accuracy", "macro_f1");
    for l in &report.labels {
        header.push_str(&format!(" {:>8}", format!("f1[{l}]")));
    }
    let _ = writeln!(out, "{header}");
    for row in &report.methods {
        let mut line = format!("{:<10} {:>6} {:>7}", row.method, row.scored, row.skipped);
        match &row.metrics {
            Some(m) => {
                line.push_str(&format!(" {:>9.4} {:>9.4}", m.accuracy, m.macro_f1));
                for l in &report.labels {
                    line.push_str(&format!(" {:>8.4}", m.per_class_f1.get(l).copied().unwrap_or(0.0)));
                }
            }
            None => line.push_str(&format!(" {:>9} {:>9}", "-", "-")),
        }
        let _ = writeln!(out, "{line}");
    }
    if !report.skipped.is_empty() {
        let _ = writeln!(out, "\nskipped instances:");
        for s in &report.skipped {
            let _ = writeln!(
                out,
                "  {} {} {}: {}",
                s.method,
                s.subject_id,
                format_timestamp(&s.prediction_time),
                s.reason
            );
        }
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn predictions_jsonl(predictions: &[PredictionResult], keep_transcripts: bool) -> Result<String> {
    let mut out = String::new();
    for p in predictions {
        let line = if keep_transcripts {
            serde_json::to_string(p)
        } else {
            let mut p = p.clone();
            p.transcript.clear();
            serde_json::to_string(&p)
        };
        out.push_str(&line.map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// metrics.json, metrics.txt, run_metadata.json and predictions/<method>.jsonl
/// (model transcripts stripped).
pub fn write_report(dir: &Path, report: &BenchReport) -> Result<()> {
    let pred_dir = dir.join(PREDICTIONS_DIR);
    fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    write(&dir.join(METRICS_JSON), pretty_json(&report.metrics)?.as_bytes())?;
    write(&dir.join(METRICS_TXT), render_table(&report.metrics).as_bytes())?;
    write(&dir.join(METADATA_JSON), pretty_json(&report.metadata)?.as_bytes())?;
    for (m, preds) in &report.predictions {
        let path = pred_dir.join(format!("{}.jsonl", m.as_str()));
        write(&path, predictions_jsonl(preds, false)?.as_bytes())?;
    }
    Ok(())
}
