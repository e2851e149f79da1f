//! Turn a raw text corpus into supervised fine-tuning query-response pairs.
//!
//! The pipeline has three steps:
//!
//! 1. [`cst`] recursively derives queries of every granularity from each
//!    context by asking a chat model to pose a question and split the
//!    context in two, then recursing on the halves.
//! 2. [`scorer`] learns a pairwise ranker from contrastive query pairs and
//!    [`filter`] keeps a high-scoring, ROUGE-L-diverse subset per context.
//! 3. [`response`] searches for good few-shot exemplars by self-evaluation
//!    and answers each retained query against its own node context.
//!
//! Every model call goes through [`llm::LlmClient`], which can be backed by a
//! real OpenAI-compatible endpoint or by the scripted [`llm::MockBackend`].

pub mod corpus;
pub mod cst;
pub mod eval;
pub mod filter;
pub mod jsonl;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod response;
pub mod scorer;
pub mod seed;

pub use corpus::{Context, Document, LengthUnit};
pub use llm::{ChatRequest, GenerationParams, LlmClient};
