//! Acceptance checks. One PASS/FAIL line per criterion; exits nonzero on any failure.

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use num_bigint::BigInt;
use num_traits::{Float, One, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use ehrrag_core::air::{iterative_retrieve, merge_evidence, AirParams};
use ehrrag_core::baselines::{
    direct_generation, react_rag, rule_based_rag, select_by_frequency, select_recent, vanilla_rag, Method,
};
use ehrrag_core::der::{predict_patient, EhrRagParams, PredictionResult, Providers};
use ehrrag_core::ether::{
    hybrid_score, numeric_pipeline, retrieve_textual, u_shape_time_score, TemporalScoringParams,
};
use ehrrag_core::eval::bench::{write_report, METRICS_JSON, METRICS_TXT};
use ehrrag_core::eval::synth::{generate_synthetic_cohort, planted_scenario, SyntheticCohortSpec, SYNTHETIC_TASK_ID};
use ehrrag_core::eval::{compute_metrics, run_benchmark, ConfusionMatrix};
use ehrrag_core::gateway::{Gateway, GatewayConfig, ScriptRule, ScriptedResponder, TemplateId};
use ehrrag_core::index::{
    build_index, build_index_with, chunk_spans, cosine_similarity, ChunkingParams, EmbeddingProvider, EventFilter,
    EvidenceChunk, HashingEmbedder, RowSpan, VectorIndex,
};
use ehrrag_core::model::{history_before, ClinicalEvent, EventType, EventValue, PatientRecord, PredictionInstance, Timestamp};
use ehrrag_core::tasks::{builtin_tasks, find_task, TaskSpec};
use ehrrag_core::RunConfig;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn base_time() -> Timestamp {
    Utc.with_ymd_and_hms(2005, 1, 1, 0, 0, 0).unwrap()
}

fn quiet_gateway(responder: ScriptedResponder) -> Gateway {
    Gateway::new(
        responder,
        GatewayConfig {
            backoff_base_ms: 0,
            ..Default::default()
        },
    )
}

// ---- exp(-num/den) in binary fixed point, for the temporal-score oracle ----

const FIX_BITS: u32 = 192;

/// `exp(-num/den) * 2^FIX_BITS`, num >= 0, den > 0.
fn fixed_exp_neg(num: &BigInt, den: &BigInt) -> BigInt {
    let one = BigInt::one() << FIX_BITS;
    let x = (num << FIX_BITS) / den;
    // halve until x < 2^-8, sum the series, square back
    let mut m = 0u32;
    let mut r = x.clone();
    while r > (&one >> 8) {
        r >>= 1;
        m += 1;
    }
    let mut sum = one.clone();
    let mut term = one.clone();
    let mut k = 1u32;
    loop {
        term = (&term * &r) / (&one * k);
        if term.is_zero() {
            break;
        }
        if k % 2 == 1 {
            sum -= &term;
        } else {
            sum += &term;
        }
        k += 1;
    }
    for _ in 0..m {
        sum = (&sum * &sum) >> FIX_BITS;
    }
    sum
}

/// Exact rational for a finite positive f64: (numerator, denominator).
fn f64_ratio(v: f64) -> (BigInt, BigInt) {
    let (mant, exp, _) = v.integer_decode();
    if exp >= 0 {
        (BigInt::from(mant) << exp as u32, BigInt::one())
    } else {
        (BigInt::from(mant), BigInt::one() << (-exp) as u32)
    }
}

fn fixed_to_f64(v: &BigInt) -> f64 {
    v.to_f64().unwrap() / 2f64.powi(FIX_BITS as i32)
}

/// Reference U-shape value from millisecond offsets and the two scales.
fn oracle_u_shape(ms_to_star: i64, ms_from_first: i64, tau_recent: f64, tau_early: f64) -> BigInt {
    let day_ms = BigInt::from(86_400_000i64);
    let term = |ms: i64, tau: f64| {
        let (tn, td) = f64_ratio(tau);
        // (ms / day_ms) / (tn / td)
        fixed_exp_neg(&(BigInt::from(ms) * td), &(&day_ms * tn))
    };
    let a = term(ms_to_star, tau_recent);
    let b = term(ms_from_first, tau_early);
    if a > b {
        a
    } else {
        b
    }
}

fn c1_u_shape() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0f64;
    for i in 0..10_000 {
        let first = base_time() + chrono::Duration::seconds(r.random_range(0..5 * 365 * 86_400));
        let span = r.random_range(0..20 * 365 * 86_400i64);
        let star = first + chrono::Duration::seconds(span);
        let c = first + chrono::Duration::seconds(if span == 0 { 0 } else { r.random_range(0..=span) });
        let params = TemporalScoringParams {
            tau_recent_days: r.random_range(30.0..730.0),
            tau_early_days: r.random_range(365.0..7300.0),
            ..Default::default()
        };
        let got = u_shape_time_score(c, star, first, &params);
        let want = fixed_to_f64(&oracle_u_shape(
            (star - c).num_milliseconds(),
            (c - first).num_milliseconds(),
            params.tau_recent_days,
            params.tau_early_days,
        ));
        let rel = ((got - want) / want).abs();
        worst = worst.max(rel);
        ensure(rel <= 1e-12, || format!("tuple {i}: got {got}, oracle {want}, rel {rel:e}"))?;
        let at_star = u_shape_time_score(star, star, first, &params);
        let at_first = u_shape_time_score(first, star, first, &params);
        ensure(at_star == 1.0 && at_first == 1.0, || {
            format!("endpoints scored {at_star}, {at_first}")
        })?;
    }
    // the worked value: 180 d and 3650 d at the defaults both give 1/e
    let first = base_time();
    let c = first + chrono::Duration::days(3650);
    let star = c + chrono::Duration::days(180);
    let v = u_shape_time_score(c, star, first, &TemporalScoringParams::default());
    let e_inv = fixed_to_f64(&fixed_exp_neg(&BigInt::one(), &BigInt::one()));
    ensure(((v - e_inv) / e_inv).abs() <= 1e-12, || format!("worked value {v} vs {e_inv}"))?;
    Ok(format!("10000 tuples, max rel err {worst:.2e}"))
}

fn c2_hybrid() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0f64;
    for i in 0..1000 {
        let s: f64 = r.random_range(-1.0..=1.0);
        let t: f64 = r.random_range(0.0..=1.0);
        let a: f64 = r.random_range(0.0..=1.0);
        let got = hybrid_score(s, t, a);
        let direct = t + a * (s - t);
        let err = (got - direct).abs();
        worst = worst.max(err);
        ensure(err <= 1e-15, || format!("case {i}: {got} vs {direct}"))?;
        ensure(hybrid_score(s, t, 1.0) == s, || format!("alpha=1 case {i}"))?;
        ensure(hybrid_score(s, t, 0.0) == t, || format!("alpha=0 case {i}"))?;
    }
    Ok(format!("1000 cases, max abs err {worst:.2e}, limits exact"))
}

const VOCAB: &[&str] = &[
    "anemia", "ferritin", "dialysis", "stent", "troponin", "insulin", "biopsy", "sepsis", "fracture", "warfarin",
    "admission", "discharge", "wound", "cough", "fever", "edema",
];

fn random_text(r: &mut Xoshiro256PlusPlus, words: usize) -> String {
    (0..words)
        .map(|_| VOCAB[r.random_range(0..VOCAB.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_index(r: &mut Xoshiro256PlusPlus, embedder: &HashingEmbedder) -> (VectorIndex, Timestamp) {
    let n = r.random_range(1..=60usize);
    let star = base_time() + chrono::Duration::days(4000);
    // coarse day grid so equal times, hence ties, are common
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(r);
    let mut chunks = Vec::with_capacity(n);
    for (k, id) in ids.into_iter().enumerate() {
        let end_day = r.random_range(0..=20) * 200;
        let end = base_time() + chrono::Duration::days(end_day);
        let words = r.random_range(1..4);
        let text = random_text(r, words);
        chunks.push(EvidenceChunk {
            chunk_id: format!("chunk-{id:03}"),
            subject_id: "S".into(),
            row_span: RowSpan { start: k, end: k },
            time_span: (end, end),
            embedding: embedder.embed(&text).unwrap(),
            text,
        });
    }
    let history_start = chunks.iter().map(|c| c.time_span.0).min();
    let index = VectorIndex {
        subject_id: "S".into(),
        chunks,
        provider_fingerprint: embedder.fingerprint(),
        dimension: embedder.dimension(),
        chunking: ChunkingParams::default(),
        filter: EventFilter::TextualOnly,
        cutoff: star,
        history_start,
        diagnostics: Vec::new(),
    };
    (index, star)
}

/// Score every chunk with the formulas written out, sort by
/// (score desc, time asc, id asc), keep k.
fn brute_force_selection(
    index: &VectorIndex,
    query: &[f32],
    star: Timestamp,
    p: &TemporalScoringParams,
) -> Vec<String> {
    let first = index.history_start.unwrap();
    let mut scored: Vec<(f64, Timestamp, String)> = index
        .chunks
        .iter()
        .map(|c| {
            let sem = cosine_similarity(query, &c.embedding).unwrap();
            let tau = c.time_span.1;
            let to_star = (star - tau).num_milliseconds() as f64 / 86_400_000.0;
            let from_first = (tau - first).num_milliseconds() as f64 / 86_400_000.0;
            let time = (-to_star / p.tau_recent_days).exp().max((-from_first / p.tau_early_days).exp());
            (p.alpha * sem + (1.0 - p.alpha) * time, tau, c.chunk_id.clone())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    scored.truncate(p.k_final);
    scored.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)));
    scored.into_iter().map(|s| s.2).collect()
}

fn c3_ranking() -> Outcome {
    let embedder = HashingEmbedder::default();
    let mut r = rng(3);
    let mut ties = 0;
    for i in 0..200 {
        let (index, star) = random_index(&mut r, &embedder);
        let params = TemporalScoringParams {
            alpha: if i % 10 == 0 { [0.0, 1.0][i / 10 % 2] } else { r.random_range(0.0..=1.0) },
            tau_recent_days: r.random_range(30.0..400.0),
            tau_early_days: r.random_range(400.0..5000.0),
            k_cand: 100,
            k_final: r.random_range(1..=10),
        };
        let query = random_text(&mut r, 3);
        let got: Vec<String> = retrieve_textual(&query, &index, star, &params, &embedder)
            .map_err(|e| e.to_string())?
            .chunks
            .into_iter()
            .map(|c| c.chunk.chunk_id)
            .collect();
        let want = brute_force_selection(&index, &embedder.embed(&query).unwrap(), star, &params);
        ensure(got == want, || format!("index {i}: got {got:?}, oracle {want:?}"))?;
        let distinct: BTreeSet<_> = index.chunks.iter().map(|c| (c.text.clone(), c.time_span.1)).collect();
        ties += (distinct.len() < index.chunks.len()) as usize;
    }
    Ok(format!("200 indexes agree ({ties} with exact score ties)"))
}

fn c4_chunking() -> Outcome {
    let mut r = rng(4);
    for i in 0..500 {
        let n = r.random_range(1..=2000usize);
        let size = r.random_range(1..=150usize);
        let overlap = r.random_range(0..size);
        let stride = size - overlap;
        let spans = chunk_spans(n, size, overlap).map_err(|e| e.to_string())?;
        let ctx = || format!("triple {i}: n={n} size={size} overlap={overlap}");
        let expected_count = if n <= size { 1 } else { (n - size).div_ceil(stride) + 1 };
        ensure(spans.len() == expected_count, || format!("{}: {} chunks, expected {expected_count}", ctx(), spans.len()))?;
        let mut covered = vec![false; n];
        for (k, s) in spans.iter().enumerate() {
            ensure(s.start == k * stride, || format!("{}: chunk {k} starts at {}", ctx(), s.start))?;
            ensure(s.end < n && s.start <= s.end, ctx)?;
            let len = s.end - s.start + 1;
            if k + 1 < spans.len() {
                ensure(len == size, || format!("{}: chunk {k} has {len} rows", ctx()))?;
            } else {
                ensure(len <= size && s.end == n - 1, || format!("{}: last chunk {s:?}", ctx()))?;
            }
            covered[s.start..=s.end].iter_mut().for_each(|c| *c = true);
        }
        ensure(covered.iter().all(|c| *c), || format!("{}: rows uncovered", ctx()))?;
        for a in 0..spans.len() {
            for b in a + 1..spans.len() {
                let (x, y) = (spans[a], spans[b]);
                let shared = (x.end.min(y.end) + 1).saturating_sub(x.start.max(y.start));
                let want = (a * stride + size).min(n).saturating_sub(b * stride);
                ensure(shared == want, || format!("{}: chunks {a},{b} share {shared}, want {want}", ctx()))?;
                if b == a + 1 {
                    let adjacent = overlap.min(n - y.start);
                    ensure(shared == adjacent, || format!("{}: adjacent overlap {shared}", ctx()))?;
                }
            }
        }
    }
    Ok("500 triples: coverage, lengths, stride and overlaps exact".into())
}

fn random_record(r: &mut Xoshiro256PlusPlus, id: &str, n: usize, numeric_fraction: f64) -> PatientRecord {
    let mut events: Vec<ClinicalEvent> = (0..n)
        .map(|_| {
            let ts = base_time() + chrono::Duration::hours(r.random_range(0..24 * 3650));
            if r.random_range(0.0..1.0) < numeric_fraction {
                let k = r.random_range(0..6);
                ClinicalEvent {
                    concept_code: format!("LAB{k}"),
                    event_type: EventType::Measurement,
                    description: format!("lab {k}"),
                    value: Some(EventValue::Numeric {
                        value: r.random_range(0..500) as f64 / 10.0,
                        unit: Some("u".into()),
                    }),
                    timestamp: ts,
                }
            } else {
                let k = r.random_range(0..VOCAB.len());
                ClinicalEvent {
                    concept_code: format!("TXT{k}"),
                    event_type: EventType::Diagnosis,
                    description: format!("{} {}", VOCAB[k], random_text(r, 2)),
                    value: None,
                    timestamp: ts,
                }
            }
        })
        .collect();
    events.sort_by_key(|e| e.timestamp);
    PatientRecord::new(id, events)
}

fn c5_air() -> Outcome {
    let embedder = HashingEmbedder::default();
    let task = find_task("guo_los", None).unwrap();
    let air = AirParams::default();
    let mut r = rng(5);
    for i in 0..100 {
        let n = r.random_range(50..800);
        let record = random_record(&mut r, &format!("P{i}"), n, 0.0);
        let star = record.last_timestamp().unwrap();
        let index = build_index(&record, star, &embedder, ChunkingParams {
            chunk_size: r.random_range(5..60),
            overlap: 2,
        })
        .map_err(|e| e.to_string())?;
        let ether = TemporalScoringParams {
            k_final: r.random_range(1..=8),
            ..Default::default()
        };
        let refine = if i % 2 == 0 {
            "MISSING: earlier admission history".to_string()
        } else {
            format!("MISSING: {}", random_text(&mut r, 2))
        };
        let gw = quiet_gateway(
            ScriptedResponder::new("")
                .rule(ScriptRule::template(TemplateId::Sufficiency, "SUFFICIENT: no"))
                .rule(ScriptRule::template(TemplateId::QueryRefine, refine)),
        );
        let mut session = gw.session("factual");
        let seed = random_text(&mut r, 3);
        let run = iterative_retrieve(&mut session, &task, &seed, &index, star, &ether, &air, &embedder)
            .map_err(|e| e.to_string())?;
        let t = &run.trace;
        ensure(t.retrieval_calls() == 3 && t.queries().len() == 3 && run.state.query_history.len() == 3, || {
            format!("scenario {i}: {} calls, {} queries", t.retrieval_calls(), t.queries().len())
        })?;
        let mut acc: BTreeSet<String> = BTreeSet::new();
        for (k, round) in t.rounds.iter().enumerate() {
            let prev = acc.clone();
            acc.extend(round.retrieved_ids.iter().cloned());
            ensure(prev.is_subset(&acc) && round.evidence_size == acc.len(), || {
                format!("scenario {i}: round {k} evidence size {} vs {}", round.evidence_size, acc.len())
            })?;
            let added: BTreeSet<String> = round.added_ids.iter().cloned().collect();
            ensure(added == &acc - &prev, || format!("scenario {i}: round {k} added ids"))?;
        }
        let final_ids: BTreeSet<String> = run.evidence.iter().map(|c| c.chunk_id.clone()).collect();
        ensure(final_ids == acc, || format!("scenario {i}: final evidence differs from union"))?;
        ensure(run.evidence.len() <= ether.k_final * 3, || format!("scenario {i}: |E| = {}", run.evidence.len()))?;
        ensure(merge_evidence(&run.evidence, &run.evidence) == run.evidence, || {
            format!("scenario {i}: merge(E,E) != E")
        })?;
        ensure(merge_evidence(&run.evidence, &[]) == run.evidence, || format!("scenario {i}: merge(E,[]) != E"))?;
    }
    Ok("100 scenarios: nested evidence, 3 calls, bounded size, idempotent merge".into())
}

fn der_responder(r: &mut Xoshiro256PlusPlus, task: &TaskSpec) -> ScriptedResponder {
    let label = |r: &mut Xoshiro256PlusPlus| task.label_values[r.random_range(0..task.label_values.len())];
    let final_reply = if r.random_range(0..4) == 0 {
        "FINAL: 99".to_string()
    } else {
        format!("weighing both sides\nFINAL: {}", label(r))
    };
    ScriptedResponder::new("unparseable")
        .rule(ScriptRule::template(TemplateId::IndicatorSelect, "SELECTED: lab 3; lab 1; lab 5"))
        .rule(ScriptRule::template(
            TemplateId::FactualHypothesis,
            format!("HYPOTHESIS: {} | for", label(r)),
        ))
        .rule(ScriptRule::template(
            TemplateId::CounterfactualHypothesis,
            format!("HYPOTHESIS: {} | against", label(r)),
        ))
        .rule(ScriptRule::template(
            TemplateId::Sufficiency,
            if r.random_range(0..2) == 0 { "SUFFICIENT: yes" } else { "SUFFICIENT: no" },
        ))
        .rule(ScriptRule::template(TemplateId::QueryRefine, format!("MISSING: {}", random_text(r, 2))))
        .rule(ScriptRule::template(TemplateId::EvidenceFusion, final_reply))
}

fn path_ids(result: &PredictionResult, path: &str) -> Option<BTreeSet<String>> {
    let t = result.traces.iter().find(|t| t.path == path)?;
    Some(t.rounds.iter().flat_map(|r| r.retrieved_ids.iter().cloned()).collect())
}

fn c6_der() -> Outcome {
    let embedder = HashingEmbedder::default();
    let tasks = builtin_tasks();
    let mut r = rng(6);
    let params = EhrRagParams::default();
    for i in 0..100 {
        let task = &tasks[i % tasks.len()];
        let n = r.random_range(100..600);
        let record = random_record(&mut r, &format!("D{i}"), n, 0.3);
        let instance = PredictionInstance {
            subject_id: record.subject_id.clone(),
            prediction_time: record.events[record.events.len() * 4 / 5].timestamp,
            true_label: None,
        };
        let responder = der_responder(&mut r, task);
        let run = || {
            let gw = quiet_gateway(responder.clone());
            let providers = Providers {
                embedder: &embedder,
                gateway: &gw,
            };
            predict_patient(&record, &instance, task, &params, &providers)
        };
        let a = run().map_err(|e| format!("run {i}: {e}"))?;
        let b = run().map_err(|e| format!("run {i}: {e}"))?;
        ensure(serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap(), || {
            format!("run {i}: rerun differs")
        })?;
        ensure(task.has_label(a.predicted_label), || format!("run {i}: label {} outside space", a.predicted_label))?;
        let fused: BTreeSet<String> = a.fused_evidence_ids.iter().cloned().collect();
        for path in ["factual", "counterfactual"] {
            let ids = path_ids(&a, path).ok_or(format!("run {i}: no {path} trace"))?;
            ensure(ids.is_subset(&fused), || format!("run {i}: {path} evidence not in fused set"))?;
        }
        // the numeric block every reasoning prompt sees
        let gw = quiet_gateway(responder.clone());
        let mut s = gw.session("numeric");
        let history = history_before(&record, instance.prediction_time);
        let numeric = numeric_pipeline(&mut s, task, history, instance.prediction_time, params.indicators, &embedder)
            .map_err(|e| e.to_string())?
            .render();
        for template in [TemplateId::FactualHypothesis, TemplateId::CounterfactualHypothesis, TemplateId::EvidenceFusion] {
            let prompt = a
                .transcript
                .iter()
                .find(|e| e.template_id == template)
                .map(|e| e.prompt.as_str())
                .ok_or(format!("run {i}: no {template:?} call"))?;
            ensure(prompt.contains(&numeric), || format!("run {i}: {template:?} prompt lacks the shared numeric block"))?;
        }
    }
    Ok("100 runs: fused superset, shared numeric block, labels in space, byte-identical reruns".into())
}

fn synthetic_setup(spec: &SyntheticCohortSpec) -> (ehrrag_core::Cohort, TaskSpec, Gateway) {
    let task = find_task(SYNTHETIC_TASK_ID, None).unwrap();
    let cohort = generate_synthetic_cohort(spec).unwrap();
    let gw = quiet_gateway(planted_scenario(spec, &task));
    (cohort, task, gw)
}

fn accuracy_of(report: &ehrrag_core::eval::MetricsReport, method: &str) -> Result<f64, String> {
    report
        .methods
        .iter()
        .find(|m| m.method == method)
        .and_then(|m| m.metrics.as_ref())
        .map(|m| m.accuracy)
        .ok_or(format!("no metrics for {method}"))
}

fn c7_planted() -> Outcome {
    let spec = SyntheticCohortSpec::default();
    let (cohort, task, gw) = synthetic_setup(&spec);
    ensure(cohort.records.len() == 60 && cohort.records.iter().all(|r| r.events.len() == 2001), || {
        "cohort shape".into()
    })?;
    let ones = cohort.labels.iter().filter(|l| l.true_label == Some(1)).count();
    ensure(ones == 30, || format!("{ones} positives of 60"))?;
    let embedder = HashingEmbedder::default();
    let providers = Providers {
        embedder: &embedder,
        gateway: &gw,
    };
    let report = run_benchmark(&cohort, &task, &[Method::EhrRag, Method::Direct], &RunConfig::default(), &providers)
        .map_err(|e| e.to_string())?;
    ensure(report.metrics.skipped.is_empty(), || format!("skipped: {:?}", report.metrics.skipped))?;
    let ours = accuracy_of(&report.metrics, "ehr-rag")?;
    let direct = accuracy_of(&report.metrics, "direct")?;
    ensure(ours == 1.0, || format!("EHR-RAG accuracy {ours}"))?;
    ensure(direct <= 0.60, || format!("direct accuracy {direct}"))?;
    Ok(format!("EHR-RAG accuracy {ours:.4}, direct (1000 most recent) {direct:.4}"))
}

/// Counts straight from the pairs, no matrix.
fn recount(labels: &[i64], pairs: &[(i64, i64)]) -> (f64, f64, HashMap<i64, f64>) {
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    let mut per = HashMap::new();
    for &l in labels {
        let tp = pairs.iter().filter(|&&(t, p)| t == l && p == l).count() as f64;
        let fp = pairs.iter().filter(|&&(t, p)| t != l && p == l).count() as f64;
        let fneg = pairs.iter().filter(|&&(t, p)| t == l && p != l).count() as f64;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
        per.insert(l, f1);
    }
    let macro_f1 = labels.iter().map(|l| per[l]).sum::<f64>() / labels.len() as f64;
    (correct as f64 / pairs.len() as f64, macro_f1, per)
}

fn c8_metrics() -> Outcome {
    let mut r = rng(8);
    let mut worst = 0f64;
    for i in 0..1000 {
        let k = r.random_range(2..=5usize);
        let labels: Vec<i64> = (0..k as i64).collect();
        let n = r.random_range(1..=60);
        let pairs: Vec<(i64, i64)> = (0..n)
            .map(|_| (r.random_range(0..k as i64), r.random_range(0..k as i64)))
            .collect();
        let m = compute_metrics(&ConfusionMatrix::from_pairs(&labels, pairs.iter().copied()).unwrap())
            .map_err(|e| e.to_string())?;
        let (acc, macro_f1, per) = recount(&labels, &pairs);
        let mut diffs = vec![(m.accuracy - acc).abs(), (m.macro_f1 - macro_f1).abs()];
        diffs.extend(labels.iter().map(|l| (m.per_class_f1[l] - per[l]).abs()));
        let d = diffs.into_iter().fold(0.0, f64::max);
        worst = worst.max(d);
        ensure(d <= 1e-12, || format!("matrix {i}: deviation {d:e}"))?;
    }
    let hand = ConfusionMatrix {
        labels: vec![0, 1],
        counts: vec![vec![1, 1], vec![1, 1]],
    };
    let m = compute_metrics(&hand).map_err(|e| e.to_string())?;
    ensure(m.accuracy == 0.5 && m.macro_f1 == 0.5, || format!("hand case {} {}", m.accuracy, m.macro_f1))?;
    Ok(format!("1000 matrices, max deviation {worst:.1e}; hand case 0.5/0.5"))
}

/// Frequency oracle: group by code, most frequent code first; inside the
/// budget, break ties newest first, then by code, then later row first.
fn frequency_oracle(history: &[ClinicalEvent], budget: usize) -> Vec<usize> {
    let mut counts: HashMap<String, i64> = HashMap::new();
    for e in history {
        *counts.entry(e.concept_code.clone()).or_default() += 1;
    }
    let mut keyed: Vec<(i64, i64, String, i64)> = history
        .iter()
        .enumerate()
        .map(|(i, e)| (-counts[&e.concept_code], -e.timestamp.timestamp_millis(), e.concept_code.clone(), -(i as i64)))
        .collect();
    keyed.sort();
    let mut rows: Vec<usize> = keyed.into_iter().take(budget).map(|k| (-k.3) as usize).collect();
    rows.sort();
    rows
}

fn c9_baselines() -> Outcome {
    let embedder = HashingEmbedder::default();
    let task = find_task("guo_readmission", None).unwrap();
    let mut r = rng(9);

    // direct: exactly the last 1000 visible events
    let events: Vec<ClinicalEvent> = (0..1500)
        .map(|i| ClinicalEvent {
            concept_code: format!("C{}", i % 37),
            event_type: EventType::Note,
            description: format!("marker{i:04}x"),
            value: None,
            timestamp: base_time() + chrono::Duration::hours(i),
        })
        .collect();
    let record = PatientRecord::new("B1", events);
    let inst = PredictionInstance {
        subject_id: "B1".into(),
        prediction_time: record.events[1399].timestamp,
        true_label: Some(0),
    };
    let gw = quiet_gateway(ScriptedResponder::new("FINAL: 0"));
    let res = direct_generation(&record, &inst, &task, &gw, 1000).map_err(|e| e.to_string())?;
    let prompt = &res.transcript[0].prompt;
    let present: Vec<usize> = (0..1500).filter(|i| prompt.contains(&format!("marker{i:04}x"))).collect();
    ensure(present == (400..1400).collect::<Vec<_>>(), || {
        format!("direct saw {} events, first {:?}", present.len(), present.first())
    })?;
    let history = history_before(&record, inst.prediction_time);
    ensure(select_recent(history, 1000) == (400..1400).collect::<Vec<_>>(), || "select_recent".into())?;

    // rule-based: frequency oracle on randomized fixtures
    for i in 0..50 {
        let n = r.random_range(10..1500);
        let rec = random_record(&mut r, "R", n, 0.3);
        let budget = r.random_range(1..1200);
        let got = select_by_frequency(&rec.events, budget);
        ensure(got == frequency_oracle(&rec.events, budget), || format!("frequency fixture {i}"))?;
    }
    let rec = random_record(&mut r, "R2", 1400, 0.3);
    let inst2 = PredictionInstance {
        subject_id: "R2".into(),
        prediction_time: rec.last_timestamp().unwrap(),
        true_label: Some(1),
    };
    let res = rule_based_rag(&rec, &inst2, &task, &gw, 1000).map_err(|e| e.to_string())?;
    let want: Vec<String> = frequency_oracle(&rec.events, 1000).iter().map(|i| format!("row:{i}")).collect();
    ensure(res.fused_evidence_ids == want, || "rule-based evidence ids".into())?;

    // vanilla: exactly ten chunks
    let index = build_index_with(&rec, inst2.prediction_time, &embedder, ChunkingParams::default(), EventFilter::All, 1)
        .map_err(|e| e.to_string())?;
    ensure(index.len() >= 12, || format!("fixture index has only {} chunks", index.len()))?;
    let res = vanilla_rag(&rec, &inst2, &task, &index, &gw, &embedder, 10).map_err(|e| e.to_string())?;
    ensure(res.fused_evidence_ids.len() == 10, || format!("vanilla used {}", res.fused_evidence_ids.len()))?;

    // react: three retrievals of five
    let gw = quiet_gateway(
        ScriptedResponder::new("FINAL: 1").rule(ScriptRule::template(TemplateId::ReactStep, "QUERY: fever cough")),
    );
    let res = react_rag(&rec, &inst2, &task, &index, &gw, &embedder, 5, 3).map_err(|e| e.to_string())?;
    let rounds = &res.traces[0].rounds;
    ensure(rounds.len() == 3 && rounds.iter().all(|r| r.retrieved_ids.len() == 5), || {
        format!("react rounds {:?}", rounds.iter().map(|r| r.retrieved_ids.len()).collect::<Vec<_>>())
    })?;
    let steps = res.transcript.iter().filter(|e| e.template_id == TemplateId::ReactStep).count();
    ensure(steps == 3, || format!("{steps} react steps"))?;
    Ok("direct=last 1000, rule=frequency oracle (51 fixtures), rag=10 chunks, react=3x5".into())
}

fn c10_determinism() -> Outcome {
    let spec = SyntheticCohortSpec::default();
    let methods = Method::ALL;
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let (cohort, task, gw) = synthetic_setup(&spec);
        let embedder = HashingEmbedder::default();
        let providers = Providers {
            embedder: &embedder,
            gateway: &gw,
        };
        let report = run_benchmark(&cohort, &task, &methods, &RunConfig::default(), &providers).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        write_report(dir.path(), &report).map_err(|e| e.to_string())?;
        let read = |f: &str| std::fs::read(dir.path().join(f)).map_err(|e| e.to_string());
        outputs.push((read(METRICS_JSON)?, read(METRICS_TXT)?));
    }
    ensure(outputs[0] == outputs[1], || "metric reports differ between runs".into())?;
    Ok(format!("6 methods x 60 patients, {} + {} report bytes identical", outputs[0].0.len(), outputs[0].1.len()))
}

fn main() {
    let criteria: Vec<(&str, u64, fn() -> Outcome)> = vec![
        ("temporal score exactness", 1, c1_u_shape),
        ("hybrid score exactness and limits", 1, c2_hybrid),
        ("ranking oracle", 30, c3_ranking),
        ("chunking law", 5, c4_chunking),
        ("iterative retrieval invariants", 10, c5_air),
        ("dual-path structure", 10, c6_der),
        ("planted evidence end to end", 120, c7_planted),
        ("metrics oracle", 5, c8_metrics),
        ("baseline settings", 10, c9_baselines),
        ("benchmark determinism", 180, c10_determinism),
    ];
    let mut failed = 0;
    for (n, (name, limit, check)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = t.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > Duration::from_secs(limit) => {
                Err(format!("{detail}; took {:.2}s, limit {limit}s", elapsed.as_secs_f64()))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{:.2}s]", n + 1, elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{:.2}s]", n + 1, elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
