//! Deterministic synthetic workload generation.
//!
//! Plans are drawn from a small operator grammar (scans with input
//! statistics, unary filters/projects/aggregates, binary joins, occasional
//! n-ary exchanges). Labels come from a hidden cost model that is additive
//! over nodes: per-kind unit costs times the rows each operator processes.
//! Two noise knobs control what a model can possibly learn:
//!
//! - `hidden_noise_sigma` scales CPU time by an unencoded log-normal factor
//!   (standing in for predicate selectivity the encoding cannot see);
//! - `cpu_latency_extra_noise` multiplies latency, but not CPU time, by a
//!   second log-normal factor (standing in for transient I/O and
//!   multi-tenant interference).
//!
//! `duplicate_fraction` re-emits existing plans verbatim with fresh hidden
//! factors, guaranteeing encoded-form collisions with label variance.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{OperatorKind, PlanNode, QueryRecord};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
}

/// Knobs for the synthetic workload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_queries: usize,
    pub max_depth: usize,
    pub n_tables: usize,
    /// How many kinds of the grammar to use, 2..=7 in order
    /// Scan, Filter, Project, Join, Aggregate, Exchange, Output.
    pub n_operator_kinds: usize,
    /// Log-normal location of leaf input rows (drives the latency skew).
    pub latency_log_mu: f64,
    /// Log-normal scale of leaf input rows.
    pub latency_log_sigma: f64,
    /// Sigma of the unencoded multiplicative CPU factor.
    pub hidden_noise_sigma: f64,
    /// Sigma of the extra multiplicative noise on latency only.
    pub cpu_latency_extra_noise: f64,
    /// Fraction of records emitted as encoding-identical twins of earlier
    /// plans, with independent hidden factors.
    pub duplicate_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_queries: 1000,
            max_depth: 5,
            n_tables: 40,
            n_operator_kinds: 7,
            latency_log_mu: 9.9,
            latency_log_sigma: 1.4,
            hidden_noise_sigma: 0.35,
            cpu_latency_extra_noise: 0.6,
            duplicate_fraction: 0.3,
            seed: 42,
        }
    }
}

const KIND_NAMES: [&str; 7] = [
    "Scan",
    "Filter",
    "Project",
    "Join",
    "Aggregate",
    "Exchange",
    "Output",
];

const DATATYPES: [&str; 6] = ["Integer", "Double", "String", "Date", "Map", "Array"];
const TYPE_WIDTHS: [u64; 6] = [8, 8, 24, 8, 48, 40];

const SCAN: usize = 0;
const FILTER: usize = 1;
const PROJECT: usize = 2;
const JOIN: usize = 3;
const AGGREGATE: usize = 4;
const EXCHANGE: usize = 5;
const OUTPUT: usize = 6;

/// Per-kind unit cost in ms per processed row; join/aggregate costs also
/// depend on the execution strategy.
const UNIT_COST: [f64; 7] = [0.0005, 0.0002, 0.0001, 0.0008, 0.0006, 0.0003, 0.0001];

const CLIENTS: [&str; 3] = ["etl", "dashboards", "adhoc"];

impl SynthConfig {
    fn check(&self) -> Result<(), SynthError> {
        if !(2..=7).contains(&self.n_operator_kinds) {
            return Err(SynthError::InvalidConfig(format!(
                "n_operator_kinds must be in 2..=7, got {}",
                self.n_operator_kinds
            )));
        }
        if self.max_depth == 0 {
            return Err(SynthError::InvalidConfig("max_depth must be >= 1".into()));
        }
        if self.n_tables == 0 {
            return Err(SynthError::InvalidConfig("n_tables must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.duplicate_fraction) {
            return Err(SynthError::InvalidConfig(
                "duplicate_fraction must be in [0, 1]".into(),
            ));
        }
        for (name, v) in [
            ("latency_log_sigma", self.latency_log_sigma),
            ("hidden_noise_sigma", self.hidden_noise_sigma),
            ("cpu_latency_extra_noise", self.cpu_latency_extra_noise),
        ] {
            if v < 0.0 {
                return Err(SynthError::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

struct Generated {
    plan: PlanNode,
    base_cost_ms: f64,
    scanned_bytes: u64,
}

/// Generates a deterministic synthetic workload. Every record passes
/// [`crate::plan::validate`]. Output is byte-identical for a fixed config.
pub fn generate(config: &SynthConfig) -> Result<Vec<QueryRecord>, SynthError> {
    config.check()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let n_dup = ((config.n_queries as f64) * config.duplicate_fraction).round() as usize;
    let n_orig = config.n_queries.saturating_sub(n_dup);

    let mut originals: Vec<Generated> = Vec::with_capacity(n_orig);
    let mut records = Vec::with_capacity(config.n_queries);
    for i in 0..n_orig {
        let generated = generate_plan(config, &mut rng);
        let record = label_record(config, &generated, i, &mut rng);
        records.push(record);
        originals.push(generated);
    }
    for i in 0..n_dup {
        if originals.is_empty() {
            break;
        }
        let pick = rng.random_range(0..originals.len());
        let record = label_record(config, &originals[pick], n_orig + i, &mut rng);
        records.push(record);
    }
    Ok(records)
}

fn label_record(
    config: &SynthConfig,
    generated: &Generated,
    index: usize,
    rng: &mut ChaCha20Rng,
) -> QueryRecord {
    let hidden: f64 = {
        let z: f64 = rng.sample(StandardNormal);
        (z * config.hidden_noise_sigma).exp()
    };
    let latency_noise: f64 = {
        let z: f64 = rng.sample(StandardNormal);
        (z * config.cpu_latency_extra_noise).exp()
    };
    let cpu_ms = (generated.base_cost_ms * hidden).max(1e-6);
    let latency_ms = (cpu_ms * 0.25 * latency_noise).max(1e-6);
    let plan = generated.plan.clone();
    QueryRecord {
        query_id: format!("q-{index:06}"),
        tables_accessed: QueryRecord::collect_tables(&plan),
        plan,
        latency_ms,
        cpu_ms,
        client: CLIENTS[index % CLIENTS.len()].to_string(),
        scanned_bytes: generated.scanned_bytes,
        system_tables_only: false,
        extra: Default::default(),
    }
}

fn generate_plan(config: &SynthConfig, rng: &mut ChaCha20Rng) -> Generated {
    // Per-query size scale keeps a query's leaves correlated; this is what
    // spreads latencies over orders of magnitude.
    let z: f64 = rng.sample(StandardNormal);
    let scale = (config.latency_log_mu + config.latency_log_sigma * z).exp();

    let mut flow = Flow::default();
    let mut body = gen_subtree(config, rng, 1, scale, &mut flow);
    if config.n_operator_kinds > OUTPUT {
        let out_metrics = body.metrics.expect("synthetic nodes carry metrics");
        flow.cost_ms += UNIT_COST[OUTPUT] * out_metrics.out_rows as f64;
        body = PlanNode::inner(kind(OUTPUT), vec![body]).with_metrics(
            out_metrics.out_rows,
            out_metrics.out_bytes,
        );
    }
    body.renumber_preorder();
    Generated {
        plan: body,
        base_cost_ms: flow.cost_ms.max(1e-3),
        scanned_bytes: flow.scanned_bytes,
    }
}

#[derive(Default)]
struct Flow {
    cost_ms: f64,
    scanned_bytes: u64,
}

fn kind(idx: usize) -> OperatorKind {
    OperatorKind {
        id: idx,
        name: KIND_NAMES[idx].to_string(),
    }
}

fn random_layout(rng: &mut ChaCha20Rng) -> Vec<String> {
    let len = rng.random_range(1..=4);
    (0..len)
        .map(|_| DATATYPES[rng.random_range(0..DATATYPES.len())].to_string())
        .collect()
}

fn row_width(layout: &[String]) -> u64 {
    layout
        .iter()
        .map(|t| {
            DATATYPES
                .iter()
                .position(|d| d == t)
                .map_or(8, |i| TYPE_WIDTHS[i])
        })
        .sum::<u64>()
        .max(8)
}

fn gen_subtree(
    config: &SynthConfig,
    rng: &mut ChaCha20Rng,
    depth: usize,
    scale: f64,
    flow: &mut Flow,
) -> PlanNode {
    let k = config.n_operator_kinds;
    let pick = if depth >= config.max_depth {
        SCAN
    } else {
        // Weighted choice over the enabled non-output kinds.
        let weights: [(usize, f64); 6] = [
            (SCAN, 0.28),
            (FILTER, 0.16),
            (PROJECT, 0.10),
            (JOIN, 0.26),
            (AGGREGATE, 0.10),
            (EXCHANGE, 0.10),
        ];
        let total: f64 = weights.iter().filter(|(i, _)| *i < k).map(|(_, w)| w).sum();
        let mut roll = rng.random_range(0.0..total);
        let mut chosen = SCAN;
        for (idx, weight) in weights.iter().filter(|(i, _)| *i < k) {
            if roll < *weight {
                chosen = *idx;
                break;
            }
            roll -= weight;
        }
        chosen
    };

    match pick {
        SCAN => {
            // Wide per-leaf spread on top of the per-query scale: plans mix
            // large and small inputs, so cost depends on the whole tree
            // rather than any single leaf.
            let z: f64 = rng.sample(StandardNormal);
            let rows = ((scale * (0.8 * z).exp()).round() as u64).max(1);
            let layout = random_layout(rng);
            let bytes = rows * row_width(&layout);
            let table = format!("t{:03}", rng.random_range(0..config.n_tables));
            flow.cost_ms += UNIT_COST[SCAN] * rows as f64;
            flow.scanned_bytes += bytes;
            let mut node = PlanNode::leaf(kind(SCAN))
                .with_table(&table)
                .with_stats(rows, bytes)
                .with_metrics(rows, bytes);
            node.layout = layout;
            node
        }
        FILTER | PROJECT => {
            let child = gen_subtree(config, rng, depth + 1, scale, flow);
            let child_metrics = child.metrics.expect("synthetic nodes carry metrics");
            let in_rows = child_metrics.out_rows;
            let out_rows = if pick == FILTER {
                ((in_rows as f64 * 0.35).round() as u64).max(1)
            } else {
                in_rows
            };
            let layout = child.layout.clone();
            let out_bytes = out_rows * row_width(&layout);
            flow.cost_ms += UNIT_COST[pick] * in_rows as f64;
            let mut node =
                PlanNode::inner(kind(pick), vec![child]).with_metrics(out_rows, out_bytes);
            node.layout = layout;
            node
        }
        AGGREGATE => {
            let child = gen_subtree(config, rng, depth + 1, scale, flow);
            let in_rows = child.metrics.expect("synthetic nodes carry metrics").out_rows;
            let phase = if rng.random_bool(0.5) { "partial" } else { "final" };
            // Final aggregation re-hashes and costs double.
            let unit = if phase == "final" {
                UNIT_COST[AGGREGATE] * 2.0
            } else {
                UNIT_COST[AGGREGATE]
            };
            let out_rows = ((in_rows as f64 * 0.12).round() as u64).max(1);
            let layout = random_layout(rng);
            let out_bytes = out_rows * row_width(&layout);
            flow.cost_ms += unit * in_rows as f64;
            let mut node = PlanNode::inner(kind(AGGREGATE), vec![child])
                .with_strategy("aggregate-phase", phase)
                .with_metrics(out_rows, out_bytes);
            node.layout = layout;
            node
        }
        JOIN => {
            let left = gen_subtree(config, rng, depth + 1, scale, flow);
            let right = gen_subtree(config, rng, depth + 1, scale, flow);
            let l_rows = left.metrics.expect("synthetic nodes carry metrics").out_rows;
            let r_rows = right.metrics.expect("synthetic nodes carry metrics").out_rows;
            let distribution = if rng.random_bool(0.5) {
                "partitioned"
            } else {
                "broadcast"
            };
            // Broadcast replicates the build side to every worker.
            let cost_rows = if distribution == "partitioned" {
                l_rows as f64 + r_rows as f64
            } else {
                l_rows as f64 + 4.0 * r_rows as f64
            };
            let out_rows = l_rows.max(r_rows);
            let layout = random_layout(rng);
            let out_bytes = out_rows * row_width(&layout);
            flow.cost_ms += UNIT_COST[JOIN] * cost_rows;
            let mut node = PlanNode::inner(kind(JOIN), vec![left, right])
                .with_strategy("join-distribution", distribution)
                .with_metrics(out_rows, out_bytes);
            node.layout = layout;
            node
        }
        EXCHANGE => {
            let n_children = rng.random_range(3..=4);
            let children: Vec<PlanNode> = (0..n_children)
                .map(|_| gen_subtree(config, rng, depth + 1, scale, flow))
                .collect();
            let in_rows: u64 = children
                .iter()
                .map(|c| c.metrics.expect("synthetic nodes carry metrics").out_rows)
                .sum();
            let layout = children[0].layout.clone();
            let out_bytes = in_rows * row_width(&layout);
            flow.cost_ms += UNIT_COST[EXCHANGE] * in_rows as f64;
            let mut node =
                PlanNode::inner(kind(EXCHANGE), children).with_metrics(in_rows, out_bytes);
            node.layout = layout;
            node
        }
        _ => unreachable!("output is added at the root only"),
    }
}
