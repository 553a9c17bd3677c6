pub mod cf;
pub mod cluster;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod hashing;
pub mod llm;
pub mod memory;
pub mod metrics;
pub mod pipeline;
pub mod reflection;
pub mod selector;
pub mod synthetic;
