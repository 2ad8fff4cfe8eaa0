//! Explainable recommendation in causal order: explanations are selected
//! first, with popularity bias removed by a counterfactual head, and the
//! selected explanations then condition an LLM ranking of candidate items.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`corpus`] – interaction data, popularity scores, evaluation episodes;
//! * [`explain`] – candidate explanation generation and clustering;
//! * [`model`] – the matching model with real and counterfactual heads;
//! * [`selector`] / [`recommender`] – inference;
//! * [`eval`] – metrics and trajectories;
//! * [`synth`] – a synthetic world with known ground truth;
//! * [`pipeline`] – orchestration of all of the above.

pub mod corpus;
pub mod eval;
pub mod explain;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod recommender;
pub mod selector;
pub mod synth;
pub mod tensor;

pub use corpus::{
    build_episodes, compute_popularity, load_interactions, CorpusError, Episode, Format, Interaction,
    InteractionDataset, PopularityTable,
};
pub use eval::{metrics_at_k, stratified_report, trajectory, AtK, EvalError, MetricReport, StrataSource, Trajectory};
pub use explain::{CandidateSet, ExplainError, ExplanationStore, HdbscanParams, RawExplanation};
pub use llm::{Gateway, GatewayConfig, LlmError, MockEmbedder, MockLlm};
pub use model::{CausalXModel, ModelConfig, ModelError, TrainConfig, TrainReport};
pub use pipeline::{PipelineConfig, PipelineError, Variant};
pub use recommender::{Provenance, RankedResult};
pub use selector::{select, what_if, ScoreParts, SelectError, SelectionResult, WhatIf};
pub use synth::{generate, GroundTruth, SynthError, WorldConfig};
pub use tensor::{Dense, TensorError};
