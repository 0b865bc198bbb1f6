//! Multi-hop question answering over incomplete knowledge graphs.
//!
//! The pipeline mines chain rules from walks between topic entities and
//! answers, executes the selected rules from a question's topic entity with
//! fuzzy step probabilities (certain for known edges, ComplEx-predicted
//! otherwise), and reranks the resulting answers.

pub mod embeddings;
pub mod eval;
pub mod graph;
pub mod llm;
pub mod mining;
pub mod retrieval;
pub mod rule;

pub use graph::{EntityId, GraphError, KnowledgeGraph, RelationId, Triple};
pub use mining::{MinedRules, MiningConfig, ProbabilityMode, QaExample};
pub use rule::LogicRule;
