//! `ehrrag` command-line entry point.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ehrrag_core::config::ChatProvider;
use ehrrag_core::der::Providers;
use ehrrag_core::eval::bench::{
    predictions_jsonl, render_table, score_method, write_report, MetricsReport, METRICS_JSON, METRICS_TXT,
};
use ehrrag_core::eval::synth::write_synthetic_cohort;
use ehrrag_core::index::{build_index_with, save_index, EventFilter};
use ehrrag_core::ingest::{parse_events, CohortSource, ColumnMap};
use ehrrag_core::model::{parse_timestamp, PredictionInstance, Timestamp};
use ehrrag_core::pipeline::predict;
use ehrrag_core::store::{load_store, read_labels, write_store, Cohort};
use ehrrag_core::tasks::{find_task, TaskSpec};
use ehrrag_core::{run_benchmark, Error, Method, PredictionResult, RunConfig, SyntheticCohortSpec};

const SNAPSHOT: &str = "resolved_config.toml";

#[derive(Parser, Debug)]
#[command(name = "ehrrag", version, about = "Retrieval-augmented prediction over long patient event histories")]
struct Cli {
    /// Minimum level of the JSON log lines written to stderr.
    #[arg(long, value_enum, default_value_t = Level::Info, global = true)]
    log_level: Level,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse an event CSV (plus optional ontology and labels) into a cohort store.
    Ingest(IngestArgs),
    /// Build and save per-subject chunk indexes.
    Index(IndexArgs),
    /// Generate a synthetic cohort with planted evidence.
    Synth(SynthArgs),
    /// Predict one task for the labelled instances of a cohort.
    Predict(PredictArgs),
    /// Score a predictions file against a labels file.
    Evaluate(EvaluateArgs),
    /// Run several methods over a cohort and write a metrics report.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau_recent: Option<f64>,
    #[arg(long)]
    tau_early: Option<f64>,
    #[arg(long)]
    k_final: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    /// Seed for uniform sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = logical cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Scripted responder scenario (TOML); replaces the configured chat provider.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    ontology: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// TOML table renaming the event columns.
    #[arg(long)]
    columns: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FilterArg {
    Textual,
    All,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Only this subject; default all.
    #[arg(long)]
    subject: Option<String>,
    #[arg(long, value_enum, default_value_t = FilterArg::Textual)]
    filter: FilterArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Cohort spec (TOML); built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TaskArgs {
    #[arg(long)]
    task: String,
    /// Extra task definitions (TOML) searched before the built-ins.
    #[arg(long)]
    tasks_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value = "ehr-rag")]
    method: Method,
    #[arg(long)]
    subject: Option<String>,
    /// Prediction time for unlabelled cohorts (default: each subject's last event).
    #[arg(long)]
    at: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Write model prompts and replies here (JSONL).
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Label space; taken from the predictions' task id when omitted.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    tasks_file: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Comma-separated: ehr-rag, direct, rag, uniform, rule, react.
    #[arg(long, value_delimiter = ',', default_value = "ehr-rag,direct,rag,uniform,rule,react")]
    methods: Vec<Method>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum Level {
    Debug,
    Info,
    Warn,
    Error,
}

struct Log {
    min: Level,
}

impl Log {
    fn emit(&self, level: Level, event: &str, fields: serde_json::Value) {
        if level < self.min {
            return;
        }
        let mut line = json!({ "level": format!("{level:?}").to_lowercase(), "event": event });
        if let (Some(obj), serde_json::Value::Object(extra)) = (line.as_object_mut(), fields) {
            obj.extend(extra);
        }
        eprintln!("{line}");
    }

    fn info(&self, event: &str, fields: serde_json::Value) {
        self.emit(Level::Info, event, fields)
    }

    fn warn(&self, event: &str, fields: serde_json::Value) {
        self.emit(Level::Warn, event, fields)
    }
}

/// Exit status for a core error.
fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) | Error::Validation(_) | Error::Parameter(_) | Error::MissingVar(_) => 2,
        Error::Transport { .. } | Error::Budget { .. } | Error::Parse(_) => 4,
        _ => 3,
    }
}

fn resolve_config(args: &ConfigArgs, log: &Log) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let from_file = args.config.is_some();
    macro_rules! apply {
        ($flag:expr, $field:expr, $name:literal) => {
            if let Some(v) = $flag {
                if from_file && $field != v {
                    log.info("flag_overrides_file", json!({ "field": $name, "file": $field, "flag": v }));
                }
                $field = v;
            }
        };
    }
    apply!(args.alpha, cfg.ether.alpha, "ether.alpha");
    apply!(args.tau_recent, cfg.ether.tau_recent_days, "ether.tau_recent_days");
    apply!(args.tau_early, cfg.ether.tau_early_days, "ether.tau_early_days");
    apply!(args.k_final, cfg.ether.k_final, "ether.k_final");
    apply!(args.max_iterations, cfg.air.max_iterations, "air.max_iterations");
    apply!(args.chunk_size, cfg.chunking.chunk_size, "chunking.chunk_size");
    apply!(args.overlap, cfg.chunking.overlap, "chunking.overlap");
    apply!(args.seed, cfg.baselines.seed, "baselines.seed");
    apply!(args.workers, cfg.runtime.workers, "runtime.workers");
    if let Some(s) = &args.scenario {
        cfg.provider.chat = ChatProvider::Scripted { scenario: s.clone() };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<(), Error> {
    create_dir(dir)?;
    write_file(&dir.join(SNAPSHOT), cfg.to_toml())
}

fn load_task(t: &TaskArgs) -> Result<TaskSpec, Error> {
    let task = find_task(&t.task, t.tasks_file.as_deref())?;
    task.validate()?;
    Ok(task)
}

fn transcript_lines(results: &[PredictionResult]) -> String {
    let mut out = String::new();
    for r in results {
        for entry in &r.transcript {
            let line = json!({ "subject_id": r.subject_id, "method": r.method, "entry": entry });
            out.push_str(&line.to_string());
            out.push('\n');
        }
    }
    out
}

fn cmd_ingest(a: &IngestArgs, log: &Log) -> Result<(), Error> {
    let mut source = CohortSource::new(&a.events);
    source.ontology_path = a.ontology.clone();
    source.labels_path = a.labels.clone();
    if let Some(p) = &a.columns {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        source.schema =
            toml::from_str::<ColumnMap>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    }
    source.check_paths()?;
    let parsed = parse_events(&source)?;
    let labels = match &a.labels {
        Some(p) => read_labels(p)?,
        None => Vec::new(),
    };
    let mut diagnostics = parsed.rejected.clone();
    diagnostics.extend(parsed.warnings.iter().cloned());
    let cohort = Cohort {
        records: parsed.records,
        labels,
    };
    let manifest = write_store(&a.out, &cohort, &diagnostics)?;
    write_snapshot(&a.out, &RunConfig::default())?;
    log.info(
        "ingested",
        json!({
            "subjects": manifest.subject_count,
            "events": manifest.event_count,
            "rejected_rows": parsed.rejected.len(),
            "content_hash": manifest.content_hash,
        }),
    );
    Ok(())
}

/// Prediction time per subject: its label, else its last event.
fn cutoffs(cohort: &Cohort) -> BTreeMap<String, Timestamp> {
    let mut out: BTreeMap<String, Timestamp> = cohort
        .records
        .iter()
        .filter_map(|r| Some((r.subject_id.clone(), r.last_timestamp()?)))
        .collect();
    for l in &cohort.labels {
        out.insert(l.subject_id.clone(), l.prediction_time);
    }
    out
}

fn cmd_index(a: &IndexArgs, log: &Log) -> Result<(), Error> {
    let cfg = resolve_config(&a.cfg, log)?;
    let cohort = load_store(&a.cohort)?;
    let embedder = cfg.embedder()?;
    let filter = match a.filter {
        FilterArg::Textual => EventFilter::TextualOnly,
        FilterArg::All => EventFilter::All,
    };
    let cut = cutoffs(&cohort);
    let mut built = 0;
    for record in &cohort.records {
        if a.subject.as_ref().is_some_and(|s| *s != record.subject_id) {
            continue;
        }
        let Some(&cutoff) = cut.get(&record.subject_id) else {
            log.warn("empty_record", json!({ "subject_id": record.subject_id }));
            continue;
        };
        let index = build_index_with(
            record,
            cutoff,
            embedder.as_ref(),
            cfg.chunking,
            filter,
            cfg.runtime.embed_in_flight,
        )?;
        let dir: String = record
            .subject_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        save_index(&a.out.join(dir), &index)?;
        built += 1;
    }
    if let Some(s) = &a.subject {
        if built == 0 {
            return Err(Error::Data(format!("subject {s:?} not in cohort")));
        }
    }
    write_snapshot(&a.out, &cfg)?;
    log.info("indexed", json!({ "subjects": built }));
    Ok(())
}

fn cmd_synth(a: &SynthArgs, log: &Log) -> Result<(), Error> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticCohortSpec::load(p)?,
        None => SyntheticCohortSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let manifest = write_synthetic_cohort(&spec, &a.out)?;
    let text = toml::to_string(&spec).map_err(|e| Error::Data(e.to_string()))?;
    write_file(&a.out.join("synth_spec.toml"), text)?;
    write_snapshot(&a.out, &RunConfig::default())?;
    log.info(
        "synthesized",
        json!({ "subjects": manifest.subject_count, "events": manifest.event_count, "content_hash": manifest.content_hash }),
    );
    Ok(())
}

fn cmd_predict(a: &PredictArgs, log: &Log) -> Result<(), Error> {
    let cfg = resolve_config(&a.cfg, log)?;
    let task = load_task(&a.task)?;
    let cohort = load_store(&a.cohort)?;
    let at = match &a.at {
        Some(s) => Some(parse_timestamp(s).ok_or_else(|| Error::Validation(format!("bad --at timestamp {s:?}")))?),
        None => None,
    };
    let mut instances: Vec<PredictionInstance> = if cohort.labels.is_empty() || at.is_some() {
        cutoffs(&cohort)
            .into_iter()
            .map(|(subject_id, t)| PredictionInstance {
                subject_id,
                prediction_time: at.unwrap_or(t),
                true_label: None,
            })
            .collect()
    } else {
        cohort.labels.clone()
    };
    if let Some(s) = &a.subject {
        instances.retain(|i| &i.subject_id == s);
        if instances.is_empty() {
            return Err(Error::Data(format!("no instance for subject {s:?}")));
        }
    }
    let gateway = cfg.gateway(&task)?;
    let embedder = cfg.embedder()?;
    let providers = Providers {
        embedder: embedder.as_ref(),
        gateway: &gateway,
    };
    create_dir(&a.out)?;
    write_snapshot(&a.out, &cfg)?;
    let started = Instant::now();
    let mut results = Vec::new();
    let mut first_error = None;
    for inst in &instances {
        let Some(record) = cohort.record(&inst.subject_id) else {
            log.warn("missing_subject", json!({ "subject_id": inst.subject_id }));
            continue;
        };
        match predict(a.method, record, inst, &task, &cfg, &providers, None) {
            Ok(r) => {
                log.emit(
                    Level::Debug,
                    "predicted",
                    json!({ "subject_id": r.subject_id, "label": r.predicted_label, "flags": r.flags.len() }),
                );
                results.push(r);
            }
            Err(e) => {
                log.emit(Level::Error, "prediction_failed", json!({ "subject_id": inst.subject_id, "error": e.to_string() }));
                first_error.get_or_insert(e);
            }
        }
    }
    write_file(&a.out.join("predictions.jsonl"), predictions_jsonl(&results, false)?)?;
    if let Some(path) = &a.trace_out {
        write_file(path, transcript_lines(&results))?;
    }
    log.info(
        "predict_done",
        json!({ "predicted": results.len(), "instances": instances.len(), "seconds": started.elapsed().as_secs_f64() }),
    );
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionResult>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn cmd_evaluate(a: &EvaluateArgs, log: &Log) -> Result<(), Error> {
    let mut predictions = read_predictions(&a.predictions)?;
    if predictions.is_empty() {
        return Err(Error::Data("predictions file is empty".into()));
    }
    let labels = read_labels(&a.labels)?;
    let truth: BTreeMap<(String, Timestamp), Option<i64>> = labels
        .iter()
        .map(|l| ((l.subject_id.clone(), l.prediction_time), l.true_label))
        .collect();
    for p in &mut predictions {
        p.true_label = truth.get(&(p.subject_id.clone(), p.prediction_time)).copied().flatten();
    }
    let task_id = a.task.clone().unwrap_or_else(|| predictions[0].task_id.clone());
    let task = find_task(&task_id, a.tasks_file.as_deref())?;
    let mut methods: Vec<String> = Vec::new();
    for p in &predictions {
        if !methods.contains(&p.method) {
            methods.push(p.method.clone());
        }
    }
    let mut report = MetricsReport {
        task_id: task.task_id.clone(),
        labels: task.label_values.clone(),
        instances: labels.len(),
        methods: Vec::new(),
        skipped: Vec::new(),
    };
    for m in &methods {
        let preds: Vec<PredictionResult> = predictions.iter().filter(|p| &p.method == m).cloned().collect();
        let (row, skipped) = score_method(m, &task, &preds);
        report.methods.push(row);
        report.skipped.extend(skipped);
    }
    if report.methods.iter().all(|m| m.metrics.is_none()) {
        return Err(Error::Data("no prediction matched a labelled instance".into()));
    }
    let table = render_table(&report);
    print!("{table}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))? + "\n";
        write_file(&dir.join(METRICS_JSON), json)?;
        write_file(&dir.join(METRICS_TXT), table)?;
        write_snapshot(dir, &RunConfig::default())?;
    }
    log.info("evaluated", json!({ "methods": methods, "skipped": report.skipped.len() }));
    Ok(())
}

fn cmd_bench(a: &BenchArgs, log: &Log) -> Result<(), Error> {
    let cfg = resolve_config(&a.cfg, log)?;
    let task = load_task(&a.task)?;
    let cohort = load_store(&a.cohort)?;
    let gateway = cfg.gateway(&task)?;
    let embedder = cfg.embedder()?;
    let providers = Providers {
        embedder: embedder.as_ref(),
        gateway: &gateway,
    };
    let report = run_benchmark(&cohort, &task, &a.methods, &cfg, &providers)?;
    write_report(&a.out, &report)?;
    write_snapshot(&a.out, &cfg)?;
    if let Some(path) = &a.trace_out {
        let all: Vec<PredictionResult> = report.predictions.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
        write_file(path, transcript_lines(&all))?;
    }
    print!("{}", render_table(&report.metrics));
    for s in &report.metrics.skipped {
        log.warn("skipped_instance", json!(s));
    }
    log.info(
        "bench_done",
        json!({ "instances": report.metadata.instances, "seconds": report.metadata.wall_time_secs }),
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let log = Log { min: cli.log_level };
    let result = match &cli.command {
        Command::Ingest(a) => cmd_ingest(a, &log),
        Command::Index(a) => cmd_index(a, &log),
        Command::Synth(a) => cmd_synth(a, &log),
        Command::Predict(a) => cmd_predict(a, &log),
        Command::Evaluate(a) => cmd_evaluate(a, &log),
        Command::Bench(a) => cmd_bench(a, &log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log.emit(Level::Error, "failed", json!({ "error": e.to_string() }));
            ExitCode::from(exit_code(&e))
        }
    }
}
