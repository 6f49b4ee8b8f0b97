//! Synthetic instruction generation and curation.

pub mod answer;
pub mod curation;
pub mod dataset;
pub mod dedup;
pub mod extract;
pub mod gateway;
pub mod pipeline;
pub mod rng;
pub mod seeds;
pub mod template;

pub use answer::{answers_equivalent, parse_answer, AnswerForm, AnswerKind};
pub use dataset::{Category, CurationVerdict, Decision, ResponseSample, SamplingParams, SeedInstruction, SyntheticRecord, VerdictReason};
pub use extract::{extract, ExtractionResult};
pub use gateway::{Backend, Gateway, GatewayConfig, SamplingProfile};
pub use seeds::{DrawMode, FewShotDraw, PoolMode, SeedPool};
pub use template::{RenderedPrompt, TemplateId, TemplateSet};
