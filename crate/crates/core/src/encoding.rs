//! Plan encodings: fitted dictionaries, per-node vectors, structural plan
//! encodings for the attention model, and flat features for boosted trees.
//!
//! An [`EncodingSpace`] is fitted once on training data and frozen. Node
//! encodings concatenate five components in a fixed order: operator type
//! (one-hot), operator layout (type counts), table name (dictionary code),
//! execution strategy (indicator), and input statistics (min-max
//! log-normalized). Fields inapplicable to an operator are zero.
//!
//! Operator kinds and data types are closed-world: encoding fails on names
//! the space has never seen. Tables are open-world and map to the reserved
//! UNK code 0, since production workloads create new tables daily.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::plan::{OperatorKind, PlanNode, QueryRecord};

/// Floor applied to values before taking logs.
pub const STAT_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("no leaf carries input_stats; stat normalizers are unfittable")]
    NoLeafStats,
    #[error("cannot fit {0} normalizer: all values equal (log_min == log_max)")]
    DegenerateNormalizer(String),
    #[error("unknown operator kind at inference: {0}")]
    UnknownOperator(String),
    #[error("unknown data type at inference: {0}")]
    UnknownDataType(String),
    #[error("label must be > 0, got {0}")]
    NonPositiveLabel(f64),
    #[error("plan has {nodes} nodes, above the configured maximum of {max}")]
    PlanTooLarge { nodes: usize, max: usize },
    #[error("encoding space deserialization failed: {0}")]
    BadSerialization(String),
}

// ---------------------------------------------------------------------------
// Encoding space
// ---------------------------------------------------------------------------

/// Min-max log normalizer for one input statistic (Eq. style:
/// `(log x - log min) / (log max - log min)`), fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatNormalizer {
    pub log_min: f64,
    pub log_max: f64,
}

impl StatNormalizer {
    fn fit(values: impl Iterator<Item = f64>, what: &str) -> Result<Self, EncodingError> {
        let mut log_min = f64::INFINITY;
        let mut log_max = f64::NEG_INFINITY;
        let mut any = false;
        for v in values {
            let lv = v.max(STAT_EPSILON).ln();
            log_min = log_min.min(lv);
            log_max = log_max.max(lv);
            any = true;
        }
        if !any {
            return Err(EncodingError::NoLeafStats);
        }
        if !(log_min < log_max) {
            return Err(EncodingError::DegenerateNormalizer(what.to_string()));
        }
        Ok(StatNormalizer { log_min, log_max })
    }

    /// Normalizes a positive value into [0, 1]; out-of-range test values are
    /// clamped. Callers clamp non-positive inputs to [`STAT_EPSILON`] first.
    pub fn normalize(&self, x: f64) -> f64 {
        let v = (x.max(STAT_EPSILON).ln() - self.log_min) / (self.log_max - self.log_min);
        v.clamp(0.0, 1.0)
    }
}

/// One execution-strategy slot. The encoded indicator is 1 when the node's
/// flag for this slot equals `flags[0]`, else 0 (also 0 when the slot does
/// not apply to the operator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySlot {
    pub name: String,
    pub flags: Vec<String>,
}

impl StrategySlot {
    pub fn new(name: &str, flags: &[&str]) -> Self {
        StrategySlot {
            name: name.to_string(),
            flags: flags.iter().map(|f| f.to_string()).collect(),
        }
    }
}

/// Options for [`fit_space`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub strategy_slots: Vec<StrategySlot>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            strategy_slots: vec![
                StrategySlot::new("join-distribution", &["partitioned", "broadcast"]),
                StrategySlot::new("aggregate-phase", &["partial", "final"]),
            ],
        }
    }
}

/// Fitted dictionaries and normalizers. Frozen after fit; treat all fields
/// as read-only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodingSpace {
    /// Concatenation layout version (fixed component order t, l, tn, s, is).
    pub layout_version: u32,
    pub operator_registry: Vec<OperatorKind>,
    pub datatype_registry: Vec<String>,
    /// Table name for code `i + 1`; code 0 is reserved for UNK.
    pub table_dictionary: Vec<String>,
    pub strategy_slots: Vec<StrategySlot>,
    pub rows_normalizer: StatNormalizer,
    pub bytes_normalizer: StatNormalizer,
    #[serde(skip)]
    table_index: HashMap<String, usize>,
    #[serde(skip)]
    operator_index: HashMap<String, usize>,
    #[serde(skip)]
    datatype_index: HashMap<String, usize>,
}

impl EncodingSpace {
    fn rebuild_indexes(&mut self) {
        self.table_index = self
            .table_dictionary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 1))
            .collect();
        self.operator_index = self
            .operator_registry
            .iter()
            .map(|k| (k.name.clone(), k.id))
            .collect();
        self.datatype_index = self
            .datatype_registry
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn n_operators(&self) -> usize {
        self.operator_registry.len()
    }

    pub fn n_datatypes(&self) -> usize {
        self.datatype_registry.len()
    }

    pub fn n_slots(&self) -> usize {
        self.strategy_slots.len()
    }

    /// Dictionary code for a table name; 0 (UNK) for unseen tables.
    pub fn table_code(&self, name: &str) -> usize {
        self.table_index.get(name).copied().unwrap_or(0)
    }

    pub fn operator_id(&self, name: &str) -> Result<usize, EncodingError> {
        self.operator_index
            .get(name)
            .copied()
            .ok_or_else(|| EncodingError::UnknownOperator(name.to_string()))
    }

    /// Width of the assembled node vector.
    pub fn concat_width(&self) -> usize {
        self.n_operators() + self.n_datatypes() + 1 + self.n_slots() + 2
    }

    /// Identifier of the flat feature layout produced by this space.
    pub fn flat_layout_id(&self) -> String {
        let names: Vec<&str> = self
            .operator_registry
            .iter()
            .map(|k| k.name.as_str())
            .collect();
        let mut hasher = Sha256::new();
        hasher.update(names.join(",").as_bytes());
        format!("flat-v{}-{}", self.layout_version, &hex::encode(hasher.finalize())[..12])
    }

    /// Content hash identifying this exact fitted space.
    pub fn version_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        hex::encode(hasher.finalize())[..16].to_string()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("encoding space serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self, EncodingError> {
        let mut space: EncodingSpace =
            serde_json::from_str(json).map_err(|e| EncodingError::BadSerialization(e.to_string()))?;
        space.rebuild_indexes();
        Ok(space)
    }
}

/// Fits an encoding space on training records.
///
/// Registries and the table dictionary are collected in first-seen preorder
/// over the training set; table codes start at 1 (0 = UNK). The stat
/// normalizers are fitted over all leaf input statistics, with values
/// floored at [`STAT_EPSILON`] before the log.
pub fn fit_space(
    train: &[QueryRecord],
    options: &FitOptions,
) -> Result<EncodingSpace, EncodingError> {
    if train.is_empty() {
        return Err(EncodingError::EmptyTrainingSet);
    }
    let mut operator_registry: Vec<OperatorKind> = Vec::new();
    let mut datatype_registry: Vec<String> = Vec::new();
    let mut table_dictionary: Vec<String> = Vec::new();
    let mut seen_ops: HashMap<String, usize> = HashMap::new();
    let mut seen_types: HashMap<String, usize> = HashMap::new();
    let mut seen_tables: HashMap<String, usize> = HashMap::new();
    let mut rows_values = Vec::new();
    let mut bytes_values = Vec::new();

    for record in train {
        for node in record.plan.preorder() {
            if !seen_ops.contains_key(&node.kind.name) {
                let id = operator_registry.len();
                seen_ops.insert(node.kind.name.clone(), id);
                operator_registry.push(OperatorKind {
                    id,
                    name: node.kind.name.clone(),
                });
            }
            for ty in &node.layout {
                if !seen_types.contains_key(ty) {
                    seen_types.insert(ty.clone(), datatype_registry.len());
                    datatype_registry.push(ty.clone());
                }
            }
            if let Some(table) = &node.table {
                if !seen_tables.contains_key(table) {
                    seen_tables.insert(table.clone(), table_dictionary.len() + 1);
                    table_dictionary.push(table.clone());
                }
            }
            if let Some(stats) = node.input_stats {
                if node.is_leaf() {
                    rows_values.push(stats.rows as f64);
                    bytes_values.push(stats.bytes as f64);
                }
            }
        }
    }

    let rows_normalizer = StatNormalizer::fit(rows_values.into_iter(), "input rows")?;
    let bytes_normalizer = StatNormalizer::fit(bytes_values.into_iter(), "input bytes")?;

    let mut space = EncodingSpace {
        layout_version: 1,
        operator_registry,
        datatype_registry,
        table_dictionary,
        strategy_slots: options.strategy_slots.clone(),
        rows_normalizer,
        bytes_normalizer,
        table_index: HashMap::new(),
        operator_index: HashMap::new(),
        datatype_index: HashMap::new(),
    };
    space.rebuild_indexes();
    Ok(space)
}

// ---------------------------------------------------------------------------
// Node encoding
// ---------------------------------------------------------------------------

/// The numeric encoding of one plan node, as component vectors plus their
/// assembled concatenation (order: t, l, tn, s, is).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEncoding {
    /// One-hot over operator kinds.
    pub e_t: Vec<f64>,
    /// Count per data type in the operator layout.
    pub e_l: Vec<f64>,
    /// Table dictionary code; 0 = UNK or inapplicable.
    pub e_tn: usize,
    /// Indicator per strategy slot.
    pub e_s: Vec<f64>,
    /// Normalized [rows, bytes] for leaf scans; zeros otherwise.
    pub e_is: [f64; 2],
    pub concat: Vec<f64>,
}

/// Encodes a single node against a fitted space.
pub fn encode_node(node: &PlanNode, space: &EncodingSpace) -> Result<NodeEncoding, EncodingError> {
    let mut e_t = vec![0.0; space.n_operators()];
    e_t[space.operator_id(&node.kind.name)?] = 1.0;

    let mut e_l = vec![0.0; space.n_datatypes()];
    for ty in &node.layout {
        let idx = space
            .datatype_index
            .get(ty)
            .copied()
            .ok_or_else(|| EncodingError::UnknownDataType(ty.clone()))?;
        e_l[idx] += 1.0;
    }

    let e_tn = node.table.as_deref().map_or(0, |t| space.table_code(t));

    let e_s: Vec<f64> = space
        .strategy_slots
        .iter()
        .map(|slot| {
            let flag = node.strategy.get(&slot.name);
            if flag.is_some_and(|f| Some(f.as_str()) == slot.flags.first().map(|s| s.as_str())) {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    let e_is = match node.input_stats {
        Some(stats) if node.is_leaf() => [
            space.rows_normalizer.normalize(stats.rows as f64),
            space.bytes_normalizer.normalize(stats.bytes as f64),
        ],
        _ => [0.0, 0.0],
    };

    let mut concat = Vec::with_capacity(space.concat_width());
    concat.extend_from_slice(&e_t);
    concat.extend_from_slice(&e_l);
    concat.push(e_tn as f64);
    concat.extend_from_slice(&e_s);
    concat.extend_from_slice(&e_is);

    Ok(NodeEncoding {
        e_t,
        e_l,
        e_tn,
        e_s,
        e_is,
        concat,
    })
}

// ---------------------------------------------------------------------------
// Structural plan encoding
// ---------------------------------------------------------------------------

/// Clamps for the structural encoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructuralParams {
    pub max_height: usize,
    pub max_dist: usize,
    pub max_nodes: usize,
}

impl Default for StructuralParams {
    fn default() -> Self {
        StructuralParams {
            max_height: 16,
            max_dist: 16,
            max_nodes: 512,
        }
    }
}

/// Structural encoding of a whole (binarized) plan for the attention model.
///
/// Index 0 of `dist` and `attend_mask` is the super node; real nodes follow
/// in preorder at indexes `1..=n`. Any pair involving the super node gets
/// the reserved distance code `max_dist + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEncoding {
    pub nodes: Vec<NodeEncoding>,
    /// Parent index per real node; -1 for the root.
    pub parent: Vec<i64>,
    /// Depth from root, clamped to `max_height`.
    pub height: Vec<usize>,
    /// (n+1) x (n+1) row-major clamped tree-distance codes.
    pub dist: Vec<u32>,
    /// (n+1) x (n+1) row-major attention mask.
    pub attend_mask: Vec<bool>,
    pub n: usize,
    pub max_height: usize,
    pub max_dist: usize,
    pub space_version: String,
}

impl PlanEncoding {
    pub fn super_dist_code(&self) -> u32 {
        self.max_dist as u32 + 1
    }

    pub fn dist_at(&self, i: usize, j: usize) -> u32 {
        self.dist[i * (self.n + 1) + j]
    }

    pub fn mask_at(&self, i: usize, j: usize) -> bool {
        self.attend_mask[i * (self.n + 1) + j]
    }
}

/// Computes the structural encoding of a binarized plan: per-node vectors in
/// preorder, height encoding, pairwise tree-distance codes, and the
/// attention mask (a node attends to itself and its descendants; the super
/// node attends to everything).
pub fn encode_plan_structural(
    plan: &PlanNode,
    space: &EncodingSpace,
    params: &StructuralParams,
) -> Result<PlanEncoding, EncodingError> {
    let nodes = plan.preorder();
    let n = nodes.len();
    if n > params.max_nodes {
        return Err(EncodingError::PlanTooLarge {
            nodes: n,
            max: params.max_nodes,
        });
    }

    // Preorder position bookkeeping: parent, depth, subtree size.
    let mut parent = vec![-1i64; n];
    let mut depth = vec![0usize; n];
    let mut subtree = vec![1usize; n];
    {
        let mut pos_of = HashMap::with_capacity(n);
        for (pos, node) in nodes.iter().enumerate() {
            pos_of.insert(node.node_id, pos);
        }
        fn walk(
            node: &PlanNode,
            pos_of: &HashMap<usize, usize>,
            parent: &mut [i64],
            depth: &mut [usize],
            subtree: &mut [usize],
        ) -> usize {
            let pos = pos_of[&node.node_id];
            let mut size = 1;
            for child in &node.children {
                let child_pos = pos_of[&child.node_id];
                parent[child_pos] = pos as i64;
                depth[child_pos] = depth[pos] + 1;
                size += walk(child, pos_of, parent, depth, subtree);
            }
            subtree[pos] = size;
            size
        }
        walk(plan, &pos_of, &mut parent, &mut depth, &mut subtree);
    }

    let encoded: Vec<NodeEncoding> = nodes
        .iter()
        .map(|node| encode_node(node, space))
        .collect::<Result<_, _>>()?;

    let height: Vec<usize> = depth.iter().map(|&d| d.min(params.max_height)).collect();

    let side = n + 1;
    let super_code = params.max_dist as u32 + 1;
    let mut dist = vec![super_code; side * side];
    let mut attend_mask = vec![false; side * side];
    for j in 0..side {
        attend_mask[j] = true; // super-node row
    }
    for i in 0..n {
        for j in 0..n {
            let d = tree_distance(i, j, &parent, &depth);
            dist[(i + 1) * side + (j + 1)] = (d as u32).min(params.max_dist as u32);
            let descendant = j > i && j < i + subtree[i];
            attend_mask[(i + 1) * side + (j + 1)] = i == j || descendant;
        }
    }

    Ok(PlanEncoding {
        nodes: encoded,
        parent,
        height,
        dist,
        attend_mask,
        n,
        max_height: params.max_height,
        max_dist: params.max_dist,
        space_version: space.version_hash(),
    })
}

fn tree_distance(mut a: usize, mut b: usize, parent: &[i64], depth: &[usize]) -> usize {
    let mut steps = 0;
    while depth[a] > depth[b] {
        a = parent[a] as usize;
        steps += 1;
    }
    while depth[b] > depth[a] {
        b = parent[b] as usize;
        steps += 1;
    }
    while a != b {
        a = parent[a] as usize;
        b = parent[b] as usize;
        steps += 2;
    }
    steps
}

/// Canonical byte key of a plan's encoded form.
///
/// Two plans get equal keys iff their full structural encodings are
/// identical. The distance matrix and attention mask are pure functions of
/// the parent list and the clamps, so serializing nodes, parents, and
/// heights (plus the clamps and space version) preserves the equivalence.
pub fn encoded_form_key(encoding: &PlanEncoding) -> Vec<u8> {
    let mut key = Vec::new();
    key.extend_from_slice(b"efk1");
    key.extend_from_slice(encoding.space_version.as_bytes());
    key.extend_from_slice(&(encoding.n as u32).to_le_bytes());
    key.extend_from_slice(&(encoding.max_height as u32).to_le_bytes());
    key.extend_from_slice(&(encoding.max_dist as u32).to_le_bytes());
    for &p in &encoding.parent {
        key.extend_from_slice(&(p as i32).to_le_bytes());
    }
    for &h in &encoding.height {
        key.extend_from_slice(&(h as u32).to_le_bytes());
    }
    for node in &encoding.nodes {
        for &v in &node.concat {
            key.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    key
}

// ---------------------------------------------------------------------------
// Flat features
// ---------------------------------------------------------------------------

/// Flat features for boosted trees: operator frequencies plus totals and
/// averages of leaf-scan input statistics. Values are raw (boosted trees are
/// insensitive to input scale); averages use integer division.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatFeatures {
    pub op_counts: Vec<f64>,
    pub total_rows: f64,
    pub avg_rows: f64,
    pub total_bytes: f64,
    pub avg_bytes: f64,
    /// Set when a scan leaf was missing input statistics (treated as 0).
    pub missing_stats: bool,
}

impl FlatFeatures {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.op_counts.clone();
        v.extend_from_slice(&[
            self.total_rows,
            self.avg_rows,
            self.total_bytes,
            self.avg_bytes,
        ]);
        v
    }

    pub fn width(n_operators: usize) -> usize {
        n_operators + 4
    }
}

/// Encodes a plan into flat features. Operator counts are computed on the
/// form passed in; callers that want n-ary semantics pass the original plan.
pub fn encode_plan_flat(
    plan: &PlanNode,
    space: &EncodingSpace,
) -> Result<FlatFeatures, EncodingError> {
    let mut op_counts = vec![0.0; space.n_operators()];
    let mut total_rows: u64 = 0;
    let mut total_bytes: u64 = 0;
    let mut n_scans: u64 = 0;
    let mut missing_stats = false;
    for node in plan.preorder() {
        op_counts[space.operator_id(&node.kind.name)?] += 1.0;
        if node.is_leaf() {
            n_scans += 1;
            match node.input_stats {
                Some(stats) => {
                    total_rows += stats.rows;
                    total_bytes += stats.bytes;
                }
                None => missing_stats = true,
            }
        }
    }
    let (avg_rows, avg_bytes) = if n_scans == 0 {
        (0, 0)
    } else {
        (total_rows / n_scans, total_bytes / n_scans)
    };
    Ok(FlatFeatures {
        op_counts,
        total_rows: total_rows as f64,
        avg_rows: avg_rows as f64,
        total_bytes: total_bytes as f64,
        avg_bytes: avg_bytes as f64,
        missing_stats,
    })
}

// ---------------------------------------------------------------------------
// Label normalization
// ---------------------------------------------------------------------------

/// Invertible label normalizer: min-max log (for neural models) or plain
/// log (for boosted trees).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelNormalizer {
    MinMaxLog {
        log_min: f64,
        log_max: f64,
        epsilon: f64,
    },
    Log {
        epsilon: f64,
    },
}

impl LabelNormalizer {
    /// Fits a min-max log normalizer over positive labels.
    pub fn fit_min_max_log(labels: &[f64]) -> Result<Self, EncodingError> {
        let mut log_min = f64::INFINITY;
        let mut log_max = f64::NEG_INFINITY;
        for &y in labels {
            let ly = y.max(STAT_EPSILON).ln();
            log_min = log_min.min(ly);
            log_max = log_max.max(ly);
        }
        if labels.is_empty() {
            return Err(EncodingError::EmptyTrainingSet);
        }
        if !(log_min < log_max) {
            return Err(EncodingError::DegenerateNormalizer("label".to_string()));
        }
        Ok(LabelNormalizer::MinMaxLog {
            log_min,
            log_max,
            epsilon: STAT_EPSILON,
        })
    }

    pub fn log() -> Self {
        LabelNormalizer::Log {
            epsilon: STAT_EPSILON,
        }
    }

    /// Normalizes a positive label. Unlike stat normalization the result is
    /// NOT clamped, so the mapping stays invertible for out-of-range labels.
    pub fn normalize(&self, y: f64) -> Result<f64, EncodingError> {
        if !(y > 0.0) {
            return Err(EncodingError::NonPositiveLabel(y));
        }
        Ok(match self {
            LabelNormalizer::MinMaxLog {
                log_min, log_max, ..
            } => (y.ln() - log_min) / (log_max - log_min),
            LabelNormalizer::Log { .. } => y.ln(),
        })
    }

    /// Exact inverse of [`normalize`](Self::normalize).
    pub fn denormalize(&self, v: f64) -> f64 {
        match self {
            LabelNormalizer::MinMaxLog {
                log_min, log_max, ..
            } => (v * (log_max - log_min) + log_min).exp(),
            LabelNormalizer::Log { .. } => v.exp(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{binarize, OperatorRegistry};
    use std::collections::BTreeMap;

    /// A record whose first leaf pins the datatype registry order used in
    /// the worked examples: Integer, Double, String, Date, Map, Array.
    fn training_records() -> Vec<QueryRecord> {
        let mut reg = OperatorRegistry::new();
        let scan_a = PlanNode::leaf(reg.intern("Scan"))
            .with_table("A")
            .with_layout(&["Integer", "Double", "String", "Date", "Map", "Array"])
            .with_stats(10, 1000);
        let scan_b = PlanNode::leaf(reg.intern("Scan"))
            .with_table("B")
            .with_layout(&["Integer"])
            .with_stats(1000, 100_000);
        let join = PlanNode::inner(reg.intern("Join"), vec![scan_a, scan_b])
            .with_strategy("join-distribution", "partitioned");
        let scan_a2 = PlanNode::leaf(reg.intern("Scan"))
            .with_table("A")
            .with_layout(&["Integer"])
            .with_stats(50, 5000);
        let scan_c = PlanNode::leaf(reg.intern("Scan"))
            .with_table("C")
            .with_layout(&["Double"])
            .with_stats(200, 20_000);
        let agg = PlanNode::inner(reg.intern("Aggregate"), vec![scan_a2])
            .with_strategy("aggregate-phase", "partial");
        let mut plan1 = PlanNode::inner(reg.intern("Output"), vec![join]);
        plan1.renumber_preorder();
        let mut plan2 = PlanNode::inner(
            reg.intern("Output"),
            vec![PlanNode::inner(reg.intern("Join"), vec![agg, scan_c])],
        );
        plan2.renumber_preorder();
        [plan1, plan2]
            .into_iter()
            .enumerate()
            .map(|(i, plan)| {
                let scanned = plan
                    .preorder()
                    .iter()
                    .filter_map(|n| n.input_stats)
                    .map(|s| s.bytes)
                    .sum();
                QueryRecord {
                    query_id: format!("q{i}"),
                    tables_accessed: QueryRecord::collect_tables(&plan),
                    plan,
                    latency_ms: 100.0 * (i + 1) as f64,
                    cpu_ms: 300.0 * (i + 1) as f64,
                    client: "tests".into(),
                    scanned_bytes: scanned,
                    system_tables_only: false,
                    extra: BTreeMap::new(),
                }
            })
            .collect()
    }

    fn space() -> EncodingSpace {
        fit_space(&training_records(), &FitOptions::default()).unwrap()
    }

    #[test]
    fn fit_assigns_table_codes_in_first_seen_order() {
        let space = space();
        // Tables appear in order A, B, A, C across the training plans.
        assert_eq!(space.table_dictionary, vec!["A", "B", "C"]);
        assert_eq!(space.table_code("A"), 1);
        assert_eq!(space.table_code("B"), 2);
        assert_eq!(space.table_code("C"), 3);
        assert_eq!(space.table_code("unseen"), 0);
    }

    #[test]
    fn fit_normalizer_bounds_follow_observed_stats() {
        let space = space();
        assert!((space.rows_normalizer.log_min - 10f64.ln()).abs() < 1e-12);
        assert!((space.rows_normalizer.log_max - 1000f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fit_single_table_corpus() {
        let mut records = training_records();
        records.truncate(1);
        for node in records[0].plan.preorder() {
            assert!(node.table.as_deref().is_none_or(|t| ["A", "B"].contains(&t)));
        }
        // Strip table B so only A remains.
        fn strip(node: &mut PlanNode) {
            if node.table.as_deref() == Some("B") {
                node.table = Some("A".to_string());
            }
            for child in &mut node.children {
                strip(child);
            }
        }
        strip(&mut records[0].plan);
        let space = fit_space(&records, &FitOptions::default()).unwrap();
        assert_eq!(space.table_dictionary.len(), 1);
        assert_eq!(space.table_code("A"), 1);
    }

    #[test]
    fn fit_fails_without_leaf_stats() {
        let mut records = training_records();
        for record in &mut records {
            fn strip(node: &mut PlanNode) {
                node.input_stats = None;
                for child in &mut node.children {
                    strip(child);
                }
            }
            strip(&mut record.plan);
            record.scanned_bytes = 0;
        }
        assert!(matches!(
            fit_space(&records, &FitOptions::default()),
            Err(EncodingError::NoLeafStats)
        ));
    }

    #[test]
    fn normalize_stat_boundaries_and_midpoint() {
        let norm = StatNormalizer {
            log_min: 10f64.ln(),
            log_max: 1000f64.ln(),
        };
        assert_eq!(norm.normalize(10.0), 0.0);
        assert_eq!(norm.normalize(1000.0), 1.0);
        assert!((norm.normalize(100.0) - 0.5).abs() < 1e-12);
        // Out-of-range test values clamp.
        assert_eq!(norm.normalize(1.0), 0.0);
        assert_eq!(norm.normalize(1e9), 1.0);
    }

    #[test]
    fn encode_node_layout_counts_match_worked_example() {
        let space = space();
        assert_eq!(
            space.datatype_registry,
            vec!["Integer", "Double", "String", "Date", "Map", "Array"]
        );
        let mut reg = OperatorRegistry::new();
        let node = PlanNode::leaf(reg.intern("Scan"))
            .with_layout(&["Integer", "Integer", "Double", "Map"]);
        let enc = encode_node(&node, &space).unwrap();
        assert_eq!(enc.e_l, vec![2.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn encode_node_strategy_indicator_matches_worked_example() {
        let space = space();
        let mut reg = OperatorRegistry::new();
        let node = PlanNode::inner(
            reg.intern("Join"),
            vec![
                PlanNode::leaf(reg.intern("Scan")),
                PlanNode::leaf(reg.intern("Scan")),
            ],
        )
        .with_strategy("join-distribution", "partitioned");
        let enc = encode_node(&node, &space).unwrap();
        assert_eq!(enc.e_s, vec![1.0, 0.0]);
        // Broadcast join flips the indicator off.
        let node = node.with_strategy("join-distribution", "broadcast");
        let enc = encode_node(&node, &space).unwrap();
        assert_eq!(enc.e_s, vec![0.0, 0.0]);
    }

    #[test]
    fn encode_node_zeroes_inapplicable_fields() {
        let space = space();
        let mut reg = OperatorRegistry::new();
        let node = PlanNode::inner(
            reg.intern("Join"),
            vec![PlanNode::leaf(reg.intern("Scan"))],
        );
        let enc = encode_node(&node, &space).unwrap();
        assert_eq!(enc.e_is, [0.0, 0.0]);
        assert_eq!(enc.e_tn, 0);
        // Exactly one hot in e_t, concat assembled in (t, l, tn, s, is) order.
        assert_eq!(enc.e_t.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(enc.concat.len(), space.concat_width());
        assert_eq!(enc.concat[space.n_operators() + space.n_datatypes()], 0.0);
    }

    #[test]
    fn encode_node_rejects_unknown_operator() {
        let space = space();
        let mut reg = OperatorRegistry::new();
        let node = PlanNode::leaf(reg.intern("Telescope"));
        assert!(matches!(
            encode_node(&node, &space),
            Err(EncodingError::UnknownOperator(_))
        ));
    }

    #[test]
    fn structural_encoding_basics() {
        let space = space();
        let records = training_records();
        let plan = binarize(&records[0].plan);
        let enc =
            encode_plan_structural(&plan, &space, &StructuralParams::default()).unwrap();
        assert_eq!(enc.n, plan.node_count());
        assert_eq!(enc.height[0], 0);
        // Parent/child pairs have distance 1.
        for (pos, &parent) in enc.parent.iter().enumerate() {
            if parent >= 0 {
                assert_eq!(enc.dist_at(parent as usize + 1, pos + 1), 1);
            }
        }
        // Symmetric on real nodes.
        for i in 1..=enc.n {
            for j in 1..=enc.n {
                assert_eq!(enc.dist_at(i, j), enc.dist_at(j, i));
            }
        }
        // Super node row: reserved code, full attention.
        for j in 0..=enc.n {
            assert_eq!(enc.dist_at(0, j), enc.super_dist_code());
            assert!(enc.mask_at(0, j));
        }
        // Root attends to every real node.
        for j in 1..=enc.n {
            assert!(enc.mask_at(1, j));
            // No real node attends to the super node.
            assert!(!enc.mask_at(j, 0));
        }
    }

    #[test]
    fn leaf_mask_row_is_self_only() {
        let space = space();
        let mut reg = OperatorRegistry::new();
        let mut plan = PlanNode::inner(
            reg.intern("Join"),
            vec![
                PlanNode::leaf(reg.intern("Scan")).with_table("A").with_stats(10, 100),
                PlanNode::leaf(reg.intern("Scan")).with_table("B").with_stats(20, 200),
            ],
        );
        plan.renumber_preorder();
        let enc =
            encode_plan_structural(&plan, &space, &StructuralParams::default()).unwrap();
        // Node at preorder position 1 is the first leaf; its row is true
        // only at itself.
        for j in 0..=enc.n {
            assert_eq!(enc.mask_at(2, j), j == 2);
        }
        // It still receives attention from its ancestor and the super node.
        assert!(enc.mask_at(1, 2));
        assert!(enc.mask_at(0, 2));
    }

    #[test]
    fn attend_mask_is_transitive() {
        let space = space();
        let plan = binarize(&training_records()[1].plan);
        let enc =
            encode_plan_structural(&plan, &space, &StructuralParams::default()).unwrap();
        for i in 1..=enc.n {
            for j in 1..=enc.n {
                for k in 1..=enc.n {
                    if enc.mask_at(i, j) && enc.mask_at(j, k) {
                        assert!(enc.mask_at(i, k));
                    }
                }
            }
        }
    }

    #[test]
    fn structural_encoding_respects_node_limit() {
        let space = space();
        let plan = binarize(&training_records()[0].plan);
        let params = StructuralParams {
            max_nodes: 2,
            ..StructuralParams::default()
        };
        match encode_plan_structural(&plan, &space, &params) {
            Err(EncodingError::PlanTooLarge { max, .. }) => assert_eq!(max, 2),
            other => panic!("expected PlanTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn flat_features_match_worked_example() {
        let space = space();
        let mut reg = OperatorRegistry::new();
        // Three scans totalling 1300 rows and 10444 bytes.
        let scans = vec![
            PlanNode::leaf(reg.intern("Scan")).with_table("A").with_stats(200, 3000),
            PlanNode::leaf(reg.intern("Scan")).with_table("B").with_stats(400, 3444),
            PlanNode::leaf(reg.intern("Scan")).with_table("C").with_stats(700, 4000),
        ];
        let mut plan = PlanNode::inner(
            reg.intern("Output"),
            vec![PlanNode::inner(
                reg.intern("Join"),
                vec![
                    scans[0].clone(),
                    PlanNode::inner(reg.intern("Join"), vec![scans[1].clone(), scans[2].clone()]),
                ],
            )],
        );
        plan.renumber_preorder();
        let flat = encode_plan_flat(&plan, &space).unwrap();
        let vector = flat.to_vector();
        let tail = &vector[vector.len() - 4..];
        assert_eq!(tail, &[1300.0, 433.0, 10444.0, 3481.0]);
        assert!(!flat.missing_stats);
    }

    #[test]
    fn flat_features_with_no_scans_are_zero() {
        let space = space();
        let mut reg = OperatorRegistry::new();
        let mut inner_node = PlanNode::leaf(reg.intern("Aggregate"));
        inner_node.layout = vec!["Integer".into()];
        let flat = encode_plan_flat(&inner_node, &space).unwrap();
        // A single node with no stats: it is a leaf without stats.
        assert_eq!(flat.total_rows, 0.0);
        assert_eq!(flat.avg_rows, 0.0);
        assert_eq!(flat.total_bytes, 0.0);
        assert_eq!(flat.avg_bytes, 0.0);
        assert!(flat.missing_stats);
    }

    #[test]
    fn duplicating_a_subtree_doubles_its_counts() {
        let space = space();
        let mut reg = OperatorRegistry::new();
        let subtree = PlanNode::inner(
            reg.intern("Aggregate"),
            vec![PlanNode::leaf(reg.intern("Scan")).with_table("A").with_stats(10, 100)],
        );
        let single = PlanNode::inner(reg.intern("Output"), vec![subtree.clone()]);
        let double = PlanNode::inner(
            reg.intern("Output"),
            vec![PlanNode::inner(
                reg.intern("Join"),
                vec![subtree.clone(), subtree.clone()],
            )],
        );
        let f1 = encode_plan_flat(&single, &space).unwrap();
        let f2 = encode_plan_flat(&double, &space).unwrap();
        let agg_id = space.operator_id("Aggregate").unwrap();
        let scan_id = space.operator_id("Scan").unwrap();
        assert_eq!(f2.op_counts[agg_id], 2.0 * f1.op_counts[agg_id]);
        assert_eq!(f2.op_counts[scan_id], 2.0 * f1.op_counts[scan_id]);
    }

    #[test]
    fn flat_counts_are_child_order_invariant() {
        let space = space();
        let mut reg = OperatorRegistry::new();
        let a = PlanNode::leaf(reg.intern("Scan")).with_table("A").with_stats(10, 100);
        let b = PlanNode::leaf(reg.intern("Scan")).with_table("B").with_stats(20, 200);
        let ab = PlanNode::inner(reg.intern("Join"), vec![a.clone(), b.clone()]);
        let ba = PlanNode::inner(reg.intern("Join"), vec![b, a]);
        assert_eq!(
            encode_plan_flat(&ab, &space).unwrap(),
            encode_plan_flat(&ba, &space).unwrap()
        );
    }

    #[test]
    fn label_normalizer_round_trips() {
        let norm = LabelNormalizer::fit_min_max_log(&[1.0, 50.0, 86_400.0]).unwrap();
        for y in [1.0, 2.5, 77.0, 86_400.0, 123_456.0] {
            let v = norm.normalize(y).unwrap();
            let back = norm.denormalize(v);
            assert!((back - y).abs() / y < 1e-9, "y={y} back={back}");
        }
        // Boundaries.
        assert!((norm.normalize(86_400.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(norm.normalize(1.0).unwrap().abs() < 1e-12);
        // Labels are NOT clamped.
        assert!(norm.normalize(1_000_000.0).unwrap() > 1.0);
        // Log kind.
        let log = LabelNormalizer::log();
        assert_eq!(log.normalize(1.0).unwrap(), 0.0);
        assert!(log.normalize(0.0).is_err());
    }

    #[test]
    fn encoded_form_key_distinguishes_encoded_differences_only() {
        let space = space();
        let params = StructuralParams::default();
        let records = training_records();
        let plan = binarize(&records[0].plan);
        let key_a = encoded_form_key(
            &encode_plan_structural(&plan, &space, &params).unwrap(),
        );
        let key_b = encoded_form_key(
            &encode_plan_structural(&plan, &space, &params).unwrap(),
        );
        assert_eq!(key_a, key_b);

        // Metrics are not encoded; changing them keeps the key equal
        // (the analogue of an unencoded predicate).
        let mut with_metrics = plan.clone();
        with_metrics.metrics = Some(crate::plan::NodeMetrics {
            out_rows: 999,
            out_bytes: 9999,
        });
        let key_c = encoded_form_key(
            &encode_plan_structural(&with_metrics, &space, &params).unwrap(),
        );
        assert_eq!(key_a, key_c);

        // Table names are encoded; changing one changes the key.
        let mut other_table = plan.clone();
        fn retable(node: &mut PlanNode) {
            if node.table.as_deref() == Some("B") {
                node.table = Some("C".to_string());
            }
            node.children.iter_mut().for_each(retable);
        }
        retable(&mut other_table);
        let key_d = encoded_form_key(
            &encode_plan_structural(&other_table, &space, &params).unwrap(),
        );
        assert_ne!(key_a, key_d);
    }

    #[test]
    fn space_serialization_round_trips_bit_exactly() {
        let space = space();
        let json = space.to_json();
        let reloaded = EncodingSpace::from_json(&json).unwrap();
        assert_eq!(reloaded.to_json(), json);
        assert_eq!(reloaded.version_hash(), space.version_hash());
        assert_eq!(reloaded.table_code("B"), 2);
    }

    #[test]
    fn node_invariants_hold_on_randomized_nodes() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let space = space();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        let kinds = ["Scan", "Join", "Aggregate", "Output"];
        let types = ["Integer", "Double", "String", "Date", "Map", "Array"];
        let mut reg = OperatorRegistry::new();
        for _ in 0..500 {
            let kind = kinds[rng.random_range(0..kinds.len())];
            let mut node = PlanNode::leaf(reg.intern(kind));
            let layout_len = rng.random_range(0..6);
            node.layout = (0..layout_len)
                .map(|_| types[rng.random_range(0..types.len())].to_string())
                .collect();
            if rng.random_bool(0.5) {
                node = node
                    .with_table(["A", "B", "C", "Z"][rng.random_range(0..4)])
                    .with_stats(rng.random_range(1..10_000), rng.random_range(1..1_000_000));
            }
            if rng.random_bool(0.3) {
                node = node.with_strategy("join-distribution", "partitioned");
            }
            let enc = encode_node(&node, &space).unwrap();
            assert_eq!(enc.e_t.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(enc.e_t.iter().filter(|&&v| v != 0.0).count(), 1);
            let sum: f64 = enc.e_l.iter().sum();
            assert_eq!(sum, node.layout.len() as f64);
            assert!(enc.e_is.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn normalize_stat_is_monotone() {
        let space = space();
        let norm = &space.rows_normalizer;
        let mut prev = norm.normalize(0.5);
        for i in 1..2000 {
            let x = i as f64 * 3.7;
            let v = norm.normalize(x);
            assert!(v >= prev);
            prev = v;
        }
    }
}
