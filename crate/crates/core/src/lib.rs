//! Schema linking for text-to-SQL: join-path discovery over a foreign-key
//! graph, LLM-assisted endpoint and path selection, gold table extraction
//! from SQL, and schema-level metrics.

pub mod graph;
pub mod harness;
pub mod llm;
pub mod metrics;
pub mod pathfinder;
pub mod schema;
pub mod sql;

pub use graph::{IdColumnRule, SchemaGraph};
pub use llm::{
    CompletionBackend, CompletionRequest, HttpBackend, LlmEndpointExtractor, LlmError,
    LlmPathSelector, ReplayCache,
};
pub use metrics::{
    aggregate, execution_match, schema_metrics, Difficulty, EvalRecord, SchemaMetrics,
};
pub use pathfinder::{
    all_shortest_paths, build_candidates, link, JoinPath, LinkError, LinkResult, LinkerConfig,
    ModePreset,
};
pub use schema::{ingest_schema_document, ingest_sqlite, ForeignKeyEdge, Schema, SchemaError};
pub use sql::{extract_tables, render_filtered_schema, render_join_path};
