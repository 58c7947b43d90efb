//! Execution-log ingestion: JSONL parsing, cleaning, biased sampling, and
//! train/test splitting.
//!
//! The log format is one JSON object per line. Unknown fields are ignored
//! but carried through, so rewriting a parsed log is lossless. Malformed
//! lines are collected as per-line diagnostics instead of failing the run;
//! real logs contain noise.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{validate, InputStats, NodeMetrics, OperatorRegistry, PlanNode, QueryRecord};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("log stream unreadable: {0}")]
    Io(#[from] io::Error),
    #[error("invalid sampling policy: {0}")]
    InvalidPolicy(String),
    #[error("test_fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct LogLine {
    query_id: String,
    latency_ms: f64,
    cpu_ms: f64,
    client: String,
    scanned_bytes: u64,
    system_tables_only: bool,
    plan: LogNode,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LogNode {
    kind: String,
    layout: Vec<String>,
    table: Option<String>,
    strategy: BTreeMap<String, String>,
    input_rows: Option<u64>,
    input_bytes: Option<u64>,
    out_rows: Option<u64>,
    out_bytes: Option<u64>,
    children: Vec<LogNode>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

impl LogNode {
    fn into_plan(self, registry: &mut OperatorRegistry) -> Result<PlanNode, String> {
        let input_stats = match (self.input_rows, self.input_bytes) {
            (Some(rows), Some(bytes)) => Some(InputStats { rows, bytes }),
            (None, None) => None,
            _ => return Err("input_rows and input_bytes must both be present or both null".into()),
        };
        let metrics = match (self.out_rows, self.out_bytes) {
            (Some(out_rows), Some(out_bytes)) => Some(NodeMetrics { out_rows, out_bytes }),
            (None, None) => None,
            _ => return Err("out_rows and out_bytes must both be present or both null".into()),
        };
        let children = self
            .children
            .into_iter()
            .map(|c| c.into_plan(registry))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PlanNode {
            node_id: 0,
            kind: registry.intern(&self.kind),
            layout: self.layout,
            table: self.table,
            strategy: self.strategy,
            input_stats,
            metrics,
            children,
            extra: self.extra,
        })
    }

    fn from_plan(node: &PlanNode) -> Self {
        LogNode {
            kind: node.kind.name.clone(),
            layout: node.layout.clone(),
            table: node.table.clone(),
            strategy: node.strategy.clone(),
            input_rows: node.input_stats.map(|s| s.rows),
            input_bytes: node.input_stats.map(|s| s.bytes),
            out_rows: node.metrics.map(|m| m.out_rows),
            out_bytes: node.metrics.map(|m| m.out_bytes),
            children: node.children.iter().map(LogNode::from_plan).collect(),
            extra: node.extra.clone(),
        }
    }
}

/// A diagnostic for one unparseable or invalid log line. Line numbers are
/// 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Result of parsing a log stream.
#[derive(Debug)]
pub struct ParseOutcome {
    pub records: Vec<QueryRecord>,
    pub registry: OperatorRegistry,
    pub errors: Vec<LineError>,
}

/// Parses a JSONL execution log. Every returned record passes
/// [`validate`]; lines that fail to parse or validate are reported in
/// `errors` with their line number and skipped.
pub fn parse_log<R: BufRead>(reader: R) -> Result<ParseOutcome, IngestError> {
    let mut records = Vec::new();
    let mut registry = OperatorRegistry::new();
    let mut errors = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, &mut registry) {
            Ok(record) => records.push(record),
            Err(message) => errors.push(LineError { line: line_no, message }),
        }
    }
    Ok(ParseOutcome {
        records,
        registry,
        errors,
    })
}

fn parse_line(line: &str, registry: &mut OperatorRegistry) -> Result<QueryRecord, String> {
    let wire: LogLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let mut plan = wire.plan.into_plan(registry)?;
    plan.renumber_preorder();
    let tables_accessed = QueryRecord::collect_tables(&plan);
    let record = QueryRecord {
        query_id: wire.query_id,
        plan,
        latency_ms: wire.latency_ms,
        cpu_ms: wire.cpu_ms,
        client: wire.client,
        scanned_bytes: wire.scanned_bytes,
        tables_accessed,
        system_tables_only: wire.system_tables_only,
        extra: wire.extra,
    };
    let violations = validate(&record);
    if violations.is_empty() {
        Ok(record)
    } else {
        Err(violations.join("; "))
    }
}

/// Serializes one record to its canonical log line (no trailing newline).
pub fn record_to_line(record: &QueryRecord) -> String {
    let wire = LogLine {
        query_id: record.query_id.clone(),
        latency_ms: record.latency_ms,
        cpu_ms: record.cpu_ms,
        client: record.client.clone(),
        scanned_bytes: record.scanned_bytes,
        system_tables_only: record.system_tables_only,
        plan: LogNode::from_plan(&record.plan),
        extra: record.extra.clone(),
    };
    serde_json::to_string(&wire).expect("log line serialization cannot fail")
}

/// Writes records as canonical JSONL. `parse_log` of the output returns the
/// same records.
pub fn write_log<W: Write>(records: &[QueryRecord], writer: &mut W) -> Result<(), IngestError> {
    for record in records {
        writer.write_all(record_to_line(record).as_bytes())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Cleaning
// ---------------------------------------------------------------------------

/// Rules for dropping noisy records before training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleaningRules {
    /// Ceiling on latency_ms / scanned_bytes; records above it are dropped.
    pub scan_latency_ratio_threshold: f64,
    pub excluded_clients: BTreeSet<String>,
    pub drop_system_table_only: bool,
}

impl Default for CleaningRules {
    fn default() -> Self {
        CleaningRules {
            // Placeholder default; production thresholds are workload-specific.
            scan_latency_ratio_threshold: 10.0,
            excluded_clients: BTreeSet::new(),
            drop_system_table_only: true,
        }
    }
}

/// Why a record was dropped during cleaning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropReason {
    ScanLatencyRatio,
    ExcludedClient,
    SystemTablesOnly,
}

impl DropReason {
    pub fn rule_name(&self) -> &'static str {
        match self {
            DropReason::ScanLatencyRatio => "scan-latency-ratio",
            DropReason::ExcludedClient => "excluded-client",
            DropReason::SystemTablesOnly => "system-tables-only",
        }
    }
}

/// Result of [`clean`]: kept records plus every drop with its rule.
#[derive(Debug)]
pub struct CleanOutcome {
    pub kept: Vec<QueryRecord>,
    pub dropped: Vec<(QueryRecord, DropReason)>,
}

/// Applies the cleaning rules. Rules are checked in a fixed order
/// (ratio, client, system tables) and the first match is recorded.
/// `scanned_bytes` is floored at 1 so zero-scan metadata queries divide
/// cleanly.
pub fn clean(records: Vec<QueryRecord>, rules: &CleaningRules) -> CleanOutcome {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for record in records {
        let ratio = record.latency_ms / (record.scanned_bytes.max(1) as f64);
        if ratio > rules.scan_latency_ratio_threshold {
            dropped.push((record, DropReason::ScanLatencyRatio));
        } else if rules.excluded_clients.contains(&record.client) {
            dropped.push((record, DropReason::ExcludedClient));
        } else if rules.drop_system_table_only && record.system_tables_only {
            dropped.push((record, DropReason::SystemTablesOnly));
        } else {
            kept.push(record);
        }
    }
    CleanOutcome { kept, dropped }
}

// ---------------------------------------------------------------------------
// Biased sampling
// ---------------------------------------------------------------------------

/// Stratified sampling policy over latency buckets.
///
/// `bucket_boundaries` of length B define B+1 half-open buckets
/// `[0, b1), [b1, b2), ..., [bB, inf)`; `per_bucket_quota` must have one
/// entry per bucket.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub bucket_boundaries: Vec<f64>,
    pub per_bucket_quota: Vec<usize>,
    pub seed: u64,
}

impl SamplingPolicy {
    fn check(&self) -> Result<(), IngestError> {
        if !self.bucket_boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(IngestError::InvalidPolicy(
                "bucket_boundaries must be strictly ascending".into(),
            ));
        }
        if self.per_bucket_quota.len() != self.bucket_boundaries.len() + 1 {
            return Err(IngestError::InvalidPolicy(format!(
                "per_bucket_quota must have {} entries (one per bucket), got {}",
                self.bucket_boundaries.len() + 1,
                self.per_bucket_quota.len()
            )));
        }
        Ok(())
    }

    fn bucket_of(&self, latency_ms: f64) -> usize {
        self.bucket_boundaries.partition_point(|&b| b <= latency_ms)
    }
}

/// Samples records per latency bucket, uniformly without replacement up to
/// each bucket's quota. Buckets smaller than their quota are taken whole.
/// Output preserves input order and is deterministic for a fixed seed.
pub fn biased_sample(
    records: &[QueryRecord],
    policy: &SamplingPolicy,
) -> Result<Vec<QueryRecord>, IngestError> {
    policy.check()?;
    let n_buckets = policy.per_bucket_quota.len();
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n_buckets];
    for (idx, record) in records.iter().enumerate() {
        buckets[policy.bucket_of(record.latency_ms)].push(idx);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(policy.seed);
    let mut selected = Vec::new();
    for (indices, &quota) in buckets.iter_mut().zip(&policy.per_bucket_quota) {
        if quota >= indices.len() {
            selected.extend_from_slice(indices);
        } else {
            // Partial Fisher-Yates: the first `quota` positions end up as a
            // uniform sample without replacement.
            for j in 0..quota {
                let pick = rng.random_range(j..indices.len());
                indices.swap(j, pick);
            }
            selected.extend_from_slice(&indices[..quota]);
        }
    }
    selected.sort_unstable();
    Ok(selected.into_iter().map(|i| records[i].clone()).collect())
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Splits records into disjoint train/test sets by query id.
///
/// All records sharing a query id land on the same side. The test side is
/// filled from a seeded shuffle of the distinct ids until it holds
/// `round(n * test_fraction)` records. Output order matches input order.
pub fn split(
    records: &[QueryRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<QueryRecord>, Vec<QueryRecord>), IngestError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(IngestError::InvalidFraction(test_fraction));
    }
    let mut ids: Vec<&str> = Vec::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for record in records {
        let entry = counts.entry(record.query_id.as_str()).or_insert(0);
        if *entry == 0 {
            ids.push(record.query_id.as_str());
        }
        *entry += 1;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let target = (records.len() as f64 * test_fraction).round() as usize;
    let mut test_ids: BTreeSet<&str> = BTreeSet::new();
    let mut taken = 0;
    for id in ids {
        if taken >= target {
            break;
        }
        taken += counts[id];
        test_ids.insert(id);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for record in records {
        if test_ids.contains(record.query_id.as_str()) {
            test.push(record.clone());
        } else {
            train.push(record.clone());
        }
    }
    Ok((train, test))
}
