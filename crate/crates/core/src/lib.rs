//! Rationale-heuristic prompting for knowledge-based visual question answering.
//!
//! The pipeline runs in three stages over a captioned VQA dataset whose
//! images have been reduced to precomputed fused feature vectors:
//!
//! 1. generate a chain-of-thought rationale for every training sample from a
//!    handful of hand-written seed examples;
//! 2. for every test sample, pick the `N` training samples whose fused
//!    features are most cosine-similar and prompt for a test rationale;
//! 3. prompt for the answer with the same examples, now carrying both
//!    rationale and answer, and score it with soft VQA accuracy.
//!
//! Every LLM call goes through [`llm_client::LlmClient`], every result is
//! cached in an append-only [`store::Store`] keyed by the hash of the exact
//! rendered prompt, so interrupted runs resume and finished runs replay for free.

pub mod config;
pub mod data_model;
pub mod evaluation;
pub mod hashing;
pub mod llm_client;
pub mod orchestrator;
pub mod prompting;
pub mod retrieval;
pub mod store;

pub use data_model::{
    load_annotations, load_dataset, validate_dataset, AnnotatedAnswers, DataError, Dataset, FeatureVector,
    PredictionRecord, RationaleRecord, RationaleStage, Sample, SampleId, Split, Violation,
};
pub use evaluation::{compare_runs, evaluate, normalize_answer, score_sample, EvalReport};
pub use prompting::{ExampleBlock, Prompt, PromptStage};
pub use retrieval::{cosine_similarity, select_examples, SelectionResult, TrainPool};
