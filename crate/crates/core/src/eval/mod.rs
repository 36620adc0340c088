//! Metrics, the benchmark runner and synthetic cohorts.

pub mod bench;
pub mod metrics;
pub mod synth;

pub use bench::{run_benchmark, write_report, BenchReport, MethodReport, MetricsReport, RunMetadata, SkippedInstance};
pub use metrics::{compute_metrics, ConfusionMatrix, Metrics};
pub use synth::{generate_synthetic_cohort, planted_scenario, Band, PlantedRule, SyntheticCohortSpec};
