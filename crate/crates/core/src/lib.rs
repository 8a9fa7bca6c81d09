//! Requirement-driven API integration test generation.
//!
//! Numeric code is generic over [`num::Scalar`]; the aliases below fix the
//! scalar to `f32` for embeddings and `f64` for metrics.

pub mod evaluation;
pub mod exec_orchestrator;
pub mod llm_gateway;
pub mod num;
pub mod output_parser;
pub mod prompt_forge;
pub mod rag_index;
pub mod session;
pub mod spec_ingest;

pub type Index = rag_index::VectorIndex<f32>;
pub type Hit = rag_index::Hit<f32>;
pub type Service = session::SessionService<f32>;
pub type Metrics = evaluation::MetricsSummary<f64>;
pub type ServiceMetrics = session::MetricsReport<f64>;
