//! Experiment orchestration: configuration, the iterative pipeline, the
//! generalization test and metric exports.

mod config;
mod evaluate;
mod pipeline;

pub use config::{Ellipse, ExperimentConfig, SuccessCriterion, TestProtocol};
pub use evaluate::{
    action_variance_profile, draw_test_set, envelope, evaluate_policy, export_metrics, median,
    success_test, Experiment, TestDistribution, VariantEvaluation, ACTION_HEADER, COST_HEADER,
    ENVELOPE_HEADER, SUCCESS_HEADER,
};
pub use pipeline::{
    compare_variants, read_theorem1_csv, run_pipeline, variant_label, verify_manifest,
    write_theorem1_csv, Artifact, ArtifactKind, ComparisonReport, ErrorInfo, Layout, RunManifest,
    StageTiming, Theorem1Row, VariantSummary, MANIFEST_SCHEMA_VERSION,
};
