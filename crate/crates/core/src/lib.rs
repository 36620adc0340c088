//! Retrieval-augmented clinical prediction over long event histories.

pub mod air;
pub mod baselines;
pub mod config;
pub mod der;
pub mod error;
pub mod ether;
pub mod eval;
pub mod gateway;
pub mod index;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod store;
pub mod tasks;

pub use error::{Error, Result};
pub use model::{ClinicalEvent, EventType, EventValue, PatientRecord, PredictionInstance, Timestamp};
pub use tasks::TaskSpec;

pub use baselines::{BaselineConfig, Method};
pub use config::RunConfig;
pub use der::{predict_patient, EhrRagParams, PredictionResult, Providers};
pub use eval::{compute_metrics, run_benchmark, ConfusionMatrix, Metrics, SyntheticCohortSpec};
pub use gateway::{ChatClient, Gateway, GatewayConfig, ScriptedResponder};
pub use index::{EmbeddingProvider, EvidenceChunk, HashingEmbedder, VectorIndex};
pub use store::Cohort;
