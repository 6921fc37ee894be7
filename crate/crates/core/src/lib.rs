//! Open-vocabulary visual emotion tagging, emotion-centric statement
//! construction, statement-judgment evaluation, and human-refinement
//! consensus.
//!
//! The pipeline runs in stages that each read and write JSONL artifacts:
//!
//! 1. [`corpus::ingest`] registers images by content digest.
//! 2. [`tagging::tag_corpus`] asks several models for emotions per image,
//!    filters and attaches the pooled terms to the [`taxonomy`], and votes
//!    consensus labels.
//! 3. [`statements::construct_corpus`] turns labels and model-written
//!    prototypes into true/false statements in four dimensions.
//! 4. [`corpus::sample_benchmark`] draws a stratified benchmark,
//!    [`refinement`] turns five human judgments per statement into a curated
//!    set, and [`eval`] scores a model on it.

pub mod config;
pub mod corpus;
pub mod digest;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod prompts;
pub mod refinement;
pub mod similarity;
pub mod statements;
pub mod tagging;
pub mod taxonomy;

pub use config::Config;
pub use corpus::ImageRecord;
pub use eval::{Decision, MetricsReport, Trial};
pub use gateway::{ChatRequest, ChatResponse, Gateway, GatewayError, ModelProfile};
pub use pipeline::Pipeline;
pub use refinement::{ConsensusClass, ConsensusOutcome, Judgment};
pub use statements::{Dimension, Statement};
pub use tagging::{ImageLabels, Label};
pub use taxonomy::{load_parrott, Polarity, Taxonomy};
