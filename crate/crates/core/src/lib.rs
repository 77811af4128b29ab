//! Reflection-chain training data construction for medical LLMs.
//!
//! The pipeline runs ingest → pinpoint → reflect → filter → emit, and the
//! evaluation harness scores any chat endpoint on multiple-choice benchmarks.

pub mod config;
pub mod corpus;
pub mod decision;
pub mod emit;
pub mod eval;
pub mod filter;
pub mod gateway;
pub mod par;
pub mod pipeline;
pub mod pinpoint;
pub mod prompts;
pub mod reflection;
pub mod seed;
pub mod text;
pub mod trajectory;
