//! Query-plan trees and execution-log records.
//!
//! A [`PlanNode`] is one operator in a plan tree, annotated with the
//! operator-level information available in execution logs: output layout,
//! scanned table, execution-strategy flags, leaf input statistics, and
//! runtime metrics. A [`QueryRecord`] couples a plan with its plan-level
//! labels (latency, CPU time). Downstream encoders consume plans through
//! [`binarize`], which rewrites n-ary operators into binary chains.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

/// An operator category, interned into a dense id space by a registry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperatorKind {
    pub id: usize,
    pub name: String,
}

/// Interns operator names into dense ids `0..K-1`. Names are unique.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorRegistry {
    kinds: Vec<OperatorKind>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl OperatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the kind for `name`, interning it with the next dense id if
    /// it has not been seen before.
    pub fn intern(&mut self, name: &str) -> OperatorKind {
        if let Some(&id) = self.index.get(name) {
            return self.kinds[id].clone();
        }
        let id = self.kinds.len();
        let kind = OperatorKind {
            id,
            name: name.to_string(),
        };
        self.kinds.push(kind.clone());
        self.index.insert(name.to_string(), id);
        kind
    }

    pub fn get(&self, name: &str) -> Option<&OperatorKind> {
        self.index.get(name).map(|&id| &self.kinds[id])
    }

    pub fn kinds(&self) -> &[OperatorKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Rebuilds the name index; needed after deserializing.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .kinds
            .iter()
            .enumerate()
            .map(|(i, k)| (k.name.clone(), i))
            .collect();
    }
}

/// Leaf input statistics: row count and byte size of the scanned input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputStats {
    pub rows: u64,
    pub bytes: u64,
}

/// Operator-level runtime metrics: output cardinality and size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub out_rows: u64,
    pub out_bytes: u64,
}

/// One operator in a plan tree.
///
/// `node_id`s form a contiguous preorder numbering assigned by this library
/// (input files are never trusted for ids). `input_stats` and `table` are
/// only meaningful on leaf scans; `metrics`, when present, are the
/// operator-level labels used by multi-task training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub node_id: usize,
    pub kind: OperatorKind,
    /// Ordered output-column data types ("operator layout").
    pub layout: Vec<String>,
    pub table: Option<String>,
    /// Strategy-slot name -> flag, e.g. "join-distribution" -> "partitioned".
    pub strategy: BTreeMap<String, String>,
    pub input_stats: Option<InputStats>,
    pub metrics: Option<NodeMetrics>,
    pub children: Vec<PlanNode>,
    /// Unknown log fields carried through for lossless rewriting.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl PlanNode {
    pub fn leaf(kind: OperatorKind) -> Self {
        Self::inner(kind, Vec::new())
    }

    pub fn inner(kind: OperatorKind, children: Vec<PlanNode>) -> Self {
        PlanNode {
            node_id: 0,
            kind,
            layout: Vec::new(),
            table: None,
            strategy: BTreeMap::new(),
            input_stats: None,
            metrics: None,
            children,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_layout(mut self, layout: &[&str]) -> Self {
        self.layout = layout.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_table(mut self, table: &str) -> Self {
        self.table = Some(table.to_string());
        self
    }

    pub fn with_strategy(mut self, slot: &str, flag: &str) -> Self {
        self.strategy.insert(slot.to_string(), flag.to_string());
        self
    }

    pub fn with_stats(mut self, rows: u64, bytes: u64) -> Self {
        self.input_stats = Some(InputStats { rows, bytes });
        self
    }

    pub fn with_metrics(mut self, out_rows: u64, out_bytes: u64) -> Self {
        self.metrics = Some(NodeMetrics {
            out_rows,
            out_bytes,
        });
        self
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Nodes in preorder (node first, then children left to right).
    pub fn preorder(&self) -> Vec<&PlanNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            out.push(node);
            for child in node.children.iter().rev() {
                stack.push(child);
            }
        }
        out
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(PlanNode::node_count).sum::<usize>()
    }

    /// Assigns contiguous preorder `node_id`s starting at 0.
    pub fn renumber_preorder(&mut self) {
        fn walk(node: &mut PlanNode, next: &mut usize) {
            node.node_id = *next;
            *next += 1;
            for child in &mut node.children {
                walk(child, next);
            }
        }
        let mut next = 0;
        walk(self, &mut next);
    }
}

/// A full execution-log record: plan plus plan-level labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub plan: PlanNode,
    pub latency_ms: f64,
    pub cpu_ms: f64,
    pub client: String,
    pub scanned_bytes: u64,
    /// Distinct table names in leaf-scan preorder, first occurrence kept.
    pub tables_accessed: Vec<String>,
    pub system_tables_only: bool,
    /// Unknown log fields carried through for lossless rewriting.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl QueryRecord {
    /// Derives `tables_accessed` from the plan's leaf tables.
    pub fn collect_tables(plan: &PlanNode) -> Vec<String> {
        let mut seen = Vec::new();
        for node in plan.preorder() {
            if let Some(table) = &node.table {
                if !seen.iter().any(|t| t == table) {
                    seen.push(table.clone());
                }
            }
        }
        seen
    }
}

/// A plan-shape digest: tree structure and operator kinds only.
///
/// Two plans have equal digests iff their trees are isomorphic under
/// preorder with equal kind names at every position. The digest is the
/// canonical preorder serialization itself, so the equivalence is exact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlanShape {
    pub digest: Vec<u8>,
}

/// Computes the shape digest of `plan`.
///
/// All node-specific information (tables, layouts, stats, metrics,
/// strategies) is ignored. Consumers that care about the binarized form
/// must binarize before digesting; this function digests the form passed in.
pub fn shape_digest(plan: &PlanNode) -> PlanShape {
    let mut digest = Vec::new();
    for node in plan.preorder() {
        let name = node.kind.name.as_bytes();
        digest.extend_from_slice(&(name.len() as u32).to_le_bytes());
        digest.extend_from_slice(name);
        digest.extend_from_slice(&(node.children.len() as u32).to_le_bytes());
    }
    PlanShape { digest }
}

/// Rewrites every n-ary operator (n > 2) into a left-deep chain of binary
/// copies of itself, so every node of the result has at most two children.
///
/// The chain keeps the first child highest: `Ex(c1,c2,c3,c4)` becomes
/// `Ex(c1, Ex(c2, Ex(c3, c4)))`. Chain nodes copy the original node's kind,
/// layout, and strategy; only the topmost chain node keeps the original
/// metrics, and synthetic nodes carry none so per-operator label totals are
/// preserved. The result is renumbered in preorder.
pub fn binarize(plan: &PlanNode) -> PlanNode {
    let mut out = binarize_rec(plan);
    out.renumber_preorder();
    out
}

fn binarize_rec(node: &PlanNode) -> PlanNode {
    let children: Vec<PlanNode> = node.children.iter().map(binarize_rec).collect();
    if children.len() <= 2 {
        let mut copy = node.clone();
        copy.children = children;
        return copy;
    }
    let mut rest = children.into_iter();
    let first = rest.next().expect("n > 2");
    let mut tail: Vec<PlanNode> = rest.collect();
    // Build the chain bottom-up from the last two children.
    let right = tail.pop().expect("n > 2");
    let left = tail.pop().expect("n > 2");
    let mut chain = chain_node(node, left, right);
    while let Some(child) = tail.pop() {
        chain = chain_node(node, child, chain);
    }
    let mut top = chain_node(node, first, chain);
    top.metrics = node.metrics;
    top.extra = node.extra.clone();
    top
}

fn chain_node(original: &PlanNode, left: PlanNode, right: PlanNode) -> PlanNode {
    PlanNode {
        node_id: 0,
        kind: original.kind.clone(),
        layout: original.layout.clone(),
        table: original.table.clone(),
        strategy: original.strategy.clone(),
        input_stats: None,
        metrics: None,
        children: vec![left, right],
        extra: BTreeMap::new(),
    }
}

/// Checks every record invariant and returns the violations found.
///
/// An empty list means the record is valid. Never mutates.
pub fn validate(record: &QueryRecord) -> Vec<String> {
    let mut violations = Vec::new();
    if !(record.latency_ms > 0.0) {
        violations.push("latency_ms must be > 0".to_string());
    }
    if !(record.cpu_ms > 0.0) {
        violations.push("cpu_ms must be > 0".to_string());
    }

    let nodes = record.plan.preorder();
    for (pos, node) in nodes.iter().enumerate() {
        if node.node_id != pos {
            violations.push(format!(
                "node_ids must form a contiguous preorder numbering (position {pos} has id {})",
                node.node_id
            ));
            break;
        }
    }
    let mut all_leaves_have_stats = true;
    let mut leaf_bytes: u64 = 0;
    for node in &nodes {
        if node.input_stats.is_some() && !node.is_leaf() {
            violations.push(format!("input_stats on non-leaf (node {})", node.node_id));
        }
        if node.is_leaf() {
            match node.input_stats {
                Some(stats) => leaf_bytes = leaf_bytes.saturating_add(stats.bytes),
                None => all_leaves_have_stats = false,
            }
        }
    }
    if all_leaves_have_stats && record.scanned_bytes != leaf_bytes {
        violations.push(format!(
            "scanned_bytes ({}) must equal the sum of leaf input_stats bytes ({leaf_bytes})",
            record.scanned_bytes
        ));
    }
    violations
}
