//! One entry point for every method, so the runner and the CLI dispatch the same way.

use crate::baselines::{direct_generation, react_rag, rule_based_rag, uniform_rag, vanilla_rag, Method};
use crate::config::RunConfig;
use crate::der::{predict_patient, PredictionResult, Providers};
use crate::error::Result;
use crate::index::{build_index_with, EventFilter, VectorIndex};
use crate::model::{PatientRecord, PredictionInstance};
use crate::tasks::TaskSpec;

/// The all-events index the retrieval baselines share.
pub fn baseline_index(
    record: &PatientRecord,
    instance: &PredictionInstance,
    config: &RunConfig,
    providers: &Providers<'_>,
) -> Result<VectorIndex> {
    build_index_with(
        record,
        instance.prediction_time,
        providers.embedder,
        config.chunking,
        EventFilter::All,
        config.runtime.embed_in_flight,
    )
}

/// Run `method` for one instance. Baselines that need an index build one
/// unless `shared` already holds it.
pub fn predict(
    method: Method,
    record: &PatientRecord,
    instance: &PredictionInstance,
    task: &TaskSpec,
    config: &RunConfig,
    providers: &Providers<'_>,
    shared: Option<&VectorIndex>,
) -> Result<PredictionResult> {
    let b = &config.baselines;
    let gateway = providers.gateway;
    let owned;
    // the full pipeline builds its own textual-only index
    let wants_shared = method.uses_index() && method != Method::EhrRag;
    let index = match (wants_shared, shared) {
        (false, _) => None,
        (true, Some(ix)) => Some(ix),
        (true, None) => {
            owned = baseline_index(record, instance, config, providers)?;
            Some(&owned)
        }
    };
    match method {
        Method::EhrRag => predict_patient(record, instance, task, &config.ehr_rag_params(), providers),
        Method::Direct => direct_generation(record, instance, task, gateway, b.event_budget),
        Method::RuleBased => rule_based_rag(record, instance, task, gateway, b.event_budget),
        Method::VanillaRag => vanilla_rag(
            record,
            instance,
            task,
            index.expect("index built"),
            gateway,
            providers.embedder,
            b.top_k_chunks,
        ),
        Method::UniformRag => uniform_rag(
            record,
            instance,
            task,
            index.expect("index built"),
            gateway,
            b.top_k_chunks,
            b.seed,
        ),
        Method::ReactRag => react_rag(
            record,
            instance,
            task,
            index.expect("index built"),
            gateway,
            providers.embedder,
            b.react_top_k,
            b.react_iterations,
        ),
    }
}
