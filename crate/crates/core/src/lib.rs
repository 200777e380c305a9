//! In-context learning pipeline for LLM-based sequential recommendation.
//!
//! A test user's history and candidate list are rendered into a prompt,
//! optionally preceded by demonstrations built from similar training users,
//! and the LLM's ranked reply is scored with NDCG@N and a candidate
//! inclusion ratio.

pub mod corpus;
pub mod demo;
pub mod eval;
pub mod http;
pub mod llm;
pub mod prompts;
pub mod retrieval;
pub mod runner;
pub mod seed;

pub use corpus::{Catalog, Item, ItemId, UserId, UserSequence};
pub use http::RetryPolicy;
