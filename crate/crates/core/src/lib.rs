//! Core library for query-plan performance prediction.
//!
//! The pipeline goes: execution logs ([`ingest`]) -> plan trees ([`plan`]) ->
//! numeric encodings ([`encoding`]) -> models ([`gbt`], [`neural`]) ->
//! accuracy reports ([`eval`]) and the encoding-collision lower bound
//! ([`bound`]). [`synth`] generates deterministic workloads for testing the
//! whole chain at desk scale.

pub mod bound;
pub mod encoding;
pub mod eval;
pub mod gbt;
pub mod ingest;
pub mod neural;
pub mod plan;
pub mod synth;

pub use plan::{OperatorKind, OperatorRegistry, PlanNode, PlanShape, QueryRecord};
