//! Toolkit for building synthetic face-recognition datasets from a latent
//! generator and a personalized text-to-image model: attribute boundaries,
//! identity synthesis, personalization job emission, curation filters and
//! score-distribution evaluation, with an analytic simulation backend.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix it to `f64`, the precision the pipeline runs in.

pub mod boundary;
pub mod curation;
pub mod error;
pub mod evaluation;
pub mod fsutil;
pub mod geometry;
pub mod identity;
pub mod latv;
pub mod personalization;
pub mod pipeline;
pub mod scalar;
pub mod seeding;
pub mod simworld;

pub use boundary::{
    evaluate_boundary, select_extremes, train_attribute_suite, train_linear_boundary, BoundaryEvaluation,
    LabeledPool, Scheme, SvmConfig,
};
pub use curation::{
    apply_filters, detection_gate, identity_preservation_score, EmbeddingVector, FilterConfig, FilterInputs,
    FilterReport, GanReference, SampleRecord, Stage, Verdict,
};
pub use error::{Error, Result};
pub use evaluation::{
    compute_eer, distribution_report, kl_divergence, sample_comparisons, score_comparisons, ComparisonParams,
    ComparisonSet, DistributionReport, Eer, Histogram, ScoreDistribution,
};
pub use geometry::{
    compose_edits, neutralize, signed_distance, transform, AttributeBoundary, BoundaryMeta, EditStep, LatentVector,
};
pub use identity::{
    build_candidate_pool, generate_variations, illumination_score, plan_demographic_groups, select_seed_candidates,
    synthesize_identity, Alphas, CandidateSample, DemographicGroup, IdentityRecord, VariationSpec,
};
pub use latv::{LatvError, VectorTable};
pub use personalization::{
    build_prompt_bank, emit_finetune_job, emit_inference_manifest, ingest_generated_samples, FinetuneJob,
    InferenceManifest, PromptSpec,
};
pub use pipeline::{execute, execute_config, ExecuteOptions, RunConfig, StageName};
pub use scalar::Scalar;
pub use simworld::{create_world, World};

pub type Latent = LatentVector<f64>;
pub type Boundary = AttributeBoundary<f64>;
pub type Embedding = EmbeddingVector<f64>;
pub type Candidate = CandidateSample<f64>;
pub type Identity = IdentityRecord<f64>;
pub type Scores = ScoreDistribution<f64>;
pub type Latent32 = LatentVector<f32>;
pub type Boundary32 = AttributeBoundary<f32>;
pub type Embedding32 = EmbeddingVector<f32>;
