//! Gradient-boosted regression trees over flat plan features.
//!
//! Exact greedy splits on second-order (gradient/hessian) gain with L2
//! regularization, sort-based rather than histogram-based: at desk scale
//! determinism and oracle-testability beat throughput. Supports squared
//! error on log labels and K-class softmax with cross-entropy, both with
//! early stopping on a validation set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GbtError {
    #[error("training set is empty")]
    EmptyInput,
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("feature vector has width {got}, model expects {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("feature layout mismatch: model was trained on '{expected}', got '{got}'")]
    LayoutMismatch { expected: String, got: String },
    #[error("class {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("class {0} is absent from the training set")]
    ClassAbsent(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("model deserialization failed: {0}")]
    BadSerialization(String),
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtConfig {
    pub max_depth: usize,
    /// Upper bound on boosting rounds; early stopping usually ends sooner.
    pub rounds: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub min_child_weight: f64,
    pub early_stopping_rounds: usize,
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            max_depth: 6,
            rounds: 500,
            learning_rate: 0.3,
            l2_reg: 1.0,
            min_child_weight: 1.0,
            early_stopping_rounds: 10,
            seed: 0,
        }
    }
}

impl GbtConfig {
    fn check(&self) -> Result<(), GbtError> {
        if self.rounds < 1 {
            return Err(GbtError::InvalidConfig("rounds must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(GbtError::InvalidConfig(
                "learning_rate must be in (0, 1]".into(),
            ));
        }
        if self.l2_reg < 0.0 || self.min_child_weight < 0.0 {
            return Err(GbtError::InvalidConfig(
                "l2_reg and min_child_weight must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    SquaredError,
    Softmax { n_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    pub value: f64,
    pub is_leaf: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            let node = &self.nodes[idx];
            if node.is_leaf {
                return node.value;
            }
            idx = if x[node.feature as usize] < node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }
}

/// A trained additive model: one tree group per round, one tree per class
/// within a group (a single tree for regression).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtModel {
    pub format_version: u32,
    pub objective: Objective,
    pub n_features: usize,
    pub feature_layout_id: String,
    pub base_score: Vec<f64>,
    pub trees: Vec<Vec<Tree>>,
    pub config: GbtConfig,
}

/// Per-round losses and the early-stopping outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Training loss; entry 0 is the base score alone, entry r the loss
    /// after round r.
    pub train_loss: Vec<f64>,
    /// Validation loss after each round (no base entry).
    pub valid_loss: Vec<f64>,
    /// 1-based round with the best validation loss.
    pub best_round: usize,
    pub rounds_trained: usize,
}

impl GbtModel {
    fn check_input(&self, features: &[f64], layout_id: &str) -> Result<(), GbtError> {
        if layout_id != self.feature_layout_id {
            return Err(GbtError::LayoutMismatch {
                expected: self.feature_layout_id.clone(),
                got: layout_id.to_string(),
            });
        }
        if features.len() != self.n_features {
            return Err(GbtError::WidthMismatch {
                expected: self.n_features,
                got: features.len(),
            });
        }
        Ok(())
    }

    /// Regression prediction, in the label's normalized (log) space.
    pub fn predict_regression(&self, features: &[f64], layout_id: &str) -> Result<f64, GbtError> {
        self.check_input(features, layout_id)?;
        debug_assert!(matches!(self.objective, Objective::SquaredError));
        let mut out = self.base_score[0];
        for group in &self.trees {
            out += group[0].predict(features);
        }
        Ok(out)
    }

    /// Classification prediction: argmax class plus the probability vector.
    pub fn predict_class(
        &self,
        features: &[f64],
        layout_id: &str,
    ) -> Result<(usize, Vec<f64>), GbtError> {
        self.check_input(features, layout_id)?;
        let k = match self.objective {
            Objective::Softmax { n_classes } => n_classes,
            Objective::SquaredError => {
                return Err(GbtError::InvalidConfig(
                    "predict_class on a regression model".into(),
                ))
            }
        };
        let mut margins = self.base_score.clone();
        for group in &self.trees {
            for (class, tree) in group.iter().enumerate() {
                margins[class] += tree.predict(features);
            }
        }
        let probs = softmax(&margins);
        let mut best = 0;
        for class in 1..k {
            if probs[class] > probs[best] {
                best = class;
            }
        }
        Ok((best, probs))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self, GbtError> {
        serde_json::from_str(json).map_err(|e| GbtError::BadSerialization(e.to_string()))
    }
}

fn softmax(margins: &[f64]) -> Vec<f64> {
    let max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = margins.iter().map(|m| (m - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

fn check_features(features: &[Vec<f64>]) -> Result<usize, GbtError> {
    if features.is_empty() {
        return Err(GbtError::EmptyInput);
    }
    let width = features[0].len();
    for (row, f) in features.iter().enumerate() {
        if f.len() != width {
            return Err(GbtError::WidthMismatch {
                expected: width,
                got: f.len(),
            });
        }
        for (col, &v) in f.iter().enumerate() {
            if !v.is_finite() {
                return Err(GbtError::NonFiniteFeature { row, col });
            }
        }
    }
    Ok(width)
}

/// Column-major copy plus per-feature argsort, computed once per training
/// run; every tree starts from these root orderings.
struct ColumnStore {
    cols: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
}

impl ColumnStore {
    fn build(features: &[Vec<f64>], width: usize) -> Self {
        let n = features.len();
        let mut cols = vec![vec![0.0; n]; width];
        for (row, f) in features.iter().enumerate() {
            for (col, &v) in f.iter().enumerate() {
                cols[col][row] = v;
            }
        }
        let sorted = cols
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| {
                    col[a as usize]
                        .total_cmp(&col[b as usize])
                        .then(a.cmp(&b))
                });
                idx
            })
            .collect();
        ColumnStore { cols, sorted }
    }
}

struct SplitChoice {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Builds one regression tree on gradient/hessian statistics with exact
/// greedy splits. Leaf values already include the learning rate.
fn build_tree(store: &ColumnStore, grad: &[f64], hess: &[f64], config: &GbtConfig) -> Tree {
    struct Work {
        slot: usize,
        lists: Vec<Vec<u32>>,
        g_sum: f64,
        h_sum: f64,
        depth: usize,
    }

    let n_features = store.cols.len();
    let mut nodes: Vec<TreeNode> = Vec::new();
    let root_lists: Vec<Vec<u32>> = store.sorted.clone();
    let g_total: f64 = grad.iter().sum();
    let h_total: f64 = hess.iter().sum();
    nodes.push(leaf_placeholder());
    let mut stack = vec![Work {
        slot: 0,
        lists: root_lists,
        g_sum: g_total,
        h_sum: h_total,
        depth: 0,
    }];

    while let Some(work) = stack.pop() {
        let n_node = work.lists[0].len();
        if work.depth >= config.max_depth || n_node < 2 {
            seal_leaf(&mut nodes, &work.slot, work.g_sum, work.h_sum, config);
            continue;
        }

        // Exact greedy split search. Iterating features then positions in
        // ascending order with a strict improvement test realizes the tie
        // rule: lowest feature index, then lowest threshold.
        let parent_score = work.g_sum * work.g_sum / (work.h_sum + config.l2_reg);
        let mut best: Option<SplitChoice> = None;
        for feature in 0..n_features {
            let col = &store.cols[feature];
            let list = &work.lists[feature];
            let mut g_left = 0.0;
            let mut h_left = 0.0;
            for pos in 0..n_node - 1 {
                let idx = list[pos] as usize;
                g_left += grad[idx];
                h_left += hess[idx];
                let v = col[idx];
                let v_next = col[list[pos + 1] as usize];
                if v_next > v {
                    let threshold = (v + v_next) / 2.0;
                    if !(threshold > v) {
                        continue; // adjacent floats; midpoint degenerate
                    }
                    let h_right = work.h_sum - h_left;
                    if h_left < config.min_child_weight || h_right < config.min_child_weight {
                        continue;
                    }
                    let g_right = work.g_sum - g_left;
                    let gain = 0.5
                        * (g_left * g_left / (h_left + config.l2_reg)
                            + g_right * g_right / (h_right + config.l2_reg)
                            - parent_score);
                    if best.as_ref().is_none_or(|b| gain > b.gain) {
                        best = Some(SplitChoice {
                            gain,
                            feature,
                            threshold,
                        });
                    }
                }
            }
        }

        let Some(split) = best.filter(|b| b.gain > 0.0) else {
            seal_leaf(&mut nodes, &work.slot, work.g_sum, work.h_sum, config);
            continue;
        };

        // Partition every feature's sorted list by the chosen predicate,
        // preserving order so no re-sorting is needed.
        let split_col = &store.cols[split.feature];
        let mut left_lists = Vec::with_capacity(n_features);
        let mut right_lists = Vec::with_capacity(n_features);
        for list in &work.lists {
            let mut left = Vec::new();
            let mut right = Vec::new();
            for &idx in list {
                if split_col[idx as usize] < split.threshold {
                    left.push(idx);
                } else {
                    right.push(idx);
                }
            }
            left_lists.push(left);
            right_lists.push(right);
        }
        let mut g_left = 0.0;
        let mut h_left = 0.0;
        for &idx in &left_lists[0] {
            g_left += grad[idx as usize];
            h_left += hess[idx as usize];
        }

        let left_slot = nodes.len();
        let right_slot = nodes.len() + 1;
        nodes.push(leaf_placeholder());
        nodes.push(leaf_placeholder());
        nodes[work.slot] = TreeNode {
            feature: split.feature as u32,
            threshold: split.threshold,
            left: left_slot as u32,
            right: right_slot as u32,
            value: 0.0,
            is_leaf: false,
        };
        stack.push(Work {
            slot: right_slot,
            lists: right_lists,
            g_sum: work.g_sum - g_left,
            h_sum: work.h_sum - h_left,
            depth: work.depth + 1,
        });
        stack.push(Work {
            slot: left_slot,
            lists: left_lists,
            g_sum: g_left,
            h_sum: h_left,
            depth: work.depth + 1,
        });
    }
    Tree { nodes }
}

fn leaf_placeholder() -> TreeNode {
    TreeNode {
        feature: 0,
        threshold: 0.0,
        left: 0,
        right: 0,
        value: 0.0,
        is_leaf: true,
    }
}

fn seal_leaf(nodes: &mut [TreeNode], slot: &usize, g_sum: f64, h_sum: f64, config: &GbtConfig) {
    nodes[*slot].is_leaf = true;
    nodes[*slot].value = -config.learning_rate * g_sum / (h_sum + config.l2_reg);
}

/// Trains a regression model on (features, log-label) pairs with squared
/// error; stops when validation loss has not improved for
/// `early_stopping_rounds` rounds and returns the best-validation snapshot.
pub fn train_regression(
    train_features: &[Vec<f64>],
    train_labels: &[f64],
    valid_features: &[Vec<f64>],
    valid_labels: &[f64],
    config: &GbtConfig,
    feature_layout_id: &str,
) -> Result<(GbtModel, TrainHistory), GbtError> {
    config.check()?;
    let width = check_features(train_features)?;
    check_features(valid_features)?;
    let n = train_features.len();
    assert_eq!(train_labels.len(), n, "labels must match features");
    assert_eq!(valid_labels.len(), valid_features.len());

    let store = ColumnStore::build(train_features, width);
    let base = train_labels.iter().sum::<f64>() / n as f64;
    let mut margins = vec![base; n];
    let mut valid_margins = vec![base; valid_features.len()];

    let mse = |margins: &[f64], labels: &[f64]| -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        margins
            .iter()
            .zip(labels)
            .map(|(m, y)| (m - y) * (m - y))
            .sum::<f64>()
            / labels.len() as f64
    };

    let mut trees: Vec<Vec<Tree>> = Vec::new();
    let mut history = TrainHistory {
        train_loss: vec![mse(&margins, train_labels)],
        valid_loss: Vec::new(),
        best_round: 0,
        rounds_trained: 0,
    };
    let mut best_valid = f64::INFINITY;
    let mut wait = 0;

    for round in 1..=config.rounds {
        let grad: Vec<f64> = margins.iter().zip(train_labels).map(|(m, y)| m - y).collect();
        let hess = vec![1.0; n];
        let tree = build_tree(&store, &grad, &hess, config);
        for (i, features) in train_features.iter().enumerate() {
            margins[i] += tree.predict(features);
        }
        for (i, features) in valid_features.iter().enumerate() {
            valid_margins[i] += tree.predict(features);
        }
        trees.push(vec![tree]);
        history.train_loss.push(mse(&margins, train_labels));
        let valid = mse(&valid_margins, valid_labels);
        history.valid_loss.push(valid);
        history.rounds_trained = round;
        if valid < best_valid {
            best_valid = valid;
            history.best_round = round;
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.early_stopping_rounds {
                break;
            }
        }
    }

    trees.truncate(history.best_round);
    Ok((
        GbtModel {
            format_version: 1,
            objective: Objective::SquaredError,
            n_features: width,
            feature_layout_id: feature_layout_id.to_string(),
            base_score: vec![base],
            trees,
            config: config.clone(),
        },
        history,
    ))
}

/// Trains a K-class softmax classifier with cross-entropy loss; one tree per
/// class per round, early stopping on validation cross-entropy.
pub fn train_classifier(
    train_features: &[Vec<f64>],
    train_classes: &[usize],
    valid_features: &[Vec<f64>],
    valid_classes: &[usize],
    n_classes: usize,
    config: &GbtConfig,
    feature_layout_id: &str,
) -> Result<(GbtModel, TrainHistory), GbtError> {
    config.check()?;
    if n_classes < 2 {
        return Err(GbtError::InvalidConfig("need at least 2 classes".into()));
    }
    let width = check_features(train_features)?;
    check_features(valid_features)?;
    let n = train_features.len();
    assert_eq!(train_classes.len(), n);
    assert_eq!(valid_classes.len(), valid_features.len());
    for &class in train_classes.iter().chain(valid_classes) {
        if class >= n_classes {
            return Err(GbtError::ClassOutOfRange { class, n_classes });
        }
    }
    for class in 0..n_classes {
        if !train_classes.contains(&class) {
            return Err(GbtError::ClassAbsent(class));
        }
    }

    let store = ColumnStore::build(train_features, width);
    let base = vec![0.0; n_classes];
    let mut margins = vec![base.clone(); n];
    let mut valid_margins = vec![base.clone(); valid_features.len()];

    let cross_entropy = |margins: &[Vec<f64>], classes: &[usize]| -> f64 {
        if classes.is_empty() {
            return 0.0;
        }
        margins
            .iter()
            .zip(classes)
            .map(|(m, &class)| {
                let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + m.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - m[class]
            })
            .sum::<f64>()
            / classes.len() as f64
    };

    let mut trees: Vec<Vec<Tree>> = Vec::new();
    let mut history = TrainHistory {
        train_loss: vec![cross_entropy(&margins, train_classes)],
        valid_loss: Vec::new(),
        best_round: 0,
        rounds_trained: 0,
    };
    let mut best_valid = f64::INFINITY;
    let mut wait = 0;

    for round in 1..=config.rounds {
        // Gradients for every class come from the same margin snapshot.
        let probs: Vec<Vec<f64>> = margins.iter().map(|m| softmax(m)).collect();
        let mut group = Vec::with_capacity(n_classes);
        for class in 0..n_classes {
            let grad: Vec<f64> = probs
                .iter()
                .zip(train_classes)
                .map(|(p, &y)| p[class] - if y == class { 1.0 } else { 0.0 })
                .collect();
            let hess: Vec<f64> = probs
                .iter()
                .map(|p| (p[class] * (1.0 - p[class])).max(1e-16))
                .collect();
            group.push(build_tree(&store, &grad, &hess, config));
        }
        for (i, features) in train_features.iter().enumerate() {
            for (class, tree) in group.iter().enumerate() {
                margins[i][class] += tree.predict(features);
            }
        }
        for (i, features) in valid_features.iter().enumerate() {
            for (class, tree) in group.iter().enumerate() {
                valid_margins[i][class] += tree.predict(features);
            }
        }
        trees.push(group);
        history.train_loss.push(cross_entropy(&margins, train_classes));
        let valid = cross_entropy(&valid_margins, valid_classes);
        history.valid_loss.push(valid);
        history.rounds_trained = round;
        if valid < best_valid {
            best_valid = valid;
            history.best_round = round;
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.early_stopping_rounds {
                break;
            }
        }
    }

    trees.truncate(history.best_round);
    Ok((
        GbtModel {
            format_version: 1,
            objective: Objective::Softmax { n_classes },
            n_features: width,
            feature_layout_id: feature_layout_id.to_string(),
            base_score: base,
            trees,
            config: config.clone(),
        },
        history,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const LAYOUT: &str = "test-layout";

    fn constant_dataset(n: usize, c: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let features: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let labels = vec![c; n];
        (features, labels)
    }

    #[test]
    fn constant_labels_are_fit_by_the_base_score() {
        let (features, labels) = constant_dataset(32, 4.25);
        let (model, history) = train_regression(
            &features,
            &labels,
            &features,
            &labels,
            &GbtConfig::default(),
            LAYOUT,
        )
        .unwrap();
        assert_eq!(history.train_loss[0], 0.0);
        let pred = model.predict_regression(&[99.0, 1.0], LAYOUT).unwrap();
        assert_eq!(pred, 4.25);
    }

    fn separable_dataset(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let features: Vec<Vec<f64>> = (0..n).map(|i| vec![(i % 2) as f64]).collect();
        let labels: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 3.0 }).collect();
        (features, labels)
    }

    #[test]
    fn separable_binary_feature_reaches_near_zero_loss() {
        let (features, labels) = separable_dataset(64);
        let config = GbtConfig {
            rounds: 20,
            learning_rate: 0.3,
            l2_reg: 0.0,
            max_depth: 2,
            early_stopping_rounds: 25,
            ..GbtConfig::default()
        };
        let (_, history) =
            train_regression(&features, &labels, &features, &labels, &config, LAYOUT).unwrap();
        assert!(
            *history.train_loss.last().unwrap() < 1e-4,
            "loss={:?}",
            history.train_loss.last()
        );
    }

    #[test]
    fn per_round_training_loss_is_non_increasing() {
        for seed in 0..5u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let features: Vec<Vec<f64>> = (0..200)
                .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let labels: Vec<f64> = features
                .iter()
                .map(|f: &Vec<f64>| f[0] * 2.0 - f[2] + rng.random_range(-0.2..0.2))
                .collect();
            let config = GbtConfig {
                rounds: 40,
                early_stopping_rounds: 40,
                ..GbtConfig::default()
            };
            let (_, history) =
                train_regression(&features, &labels, &features, &labels, &config, LAYOUT)
                    .unwrap();
            for w in history.train_loss.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "loss increased: {w:?}");
            }
        }
    }

    #[test]
    fn early_stopping_halts_ten_rounds_after_the_best_round() {
        // lr = 1 nails the separable set in one round; every later round
        // adds an all-zero tree, so validation loss plateaus exactly.
        let (features, labels) = separable_dataset(64);
        let config = GbtConfig {
            rounds: 100,
            learning_rate: 1.0,
            l2_reg: 0.0,
            max_depth: 2,
            early_stopping_rounds: 10,
            ..GbtConfig::default()
        };
        let (model, history) =
            train_regression(&features, &labels, &features, &labels, &config, LAYOUT).unwrap();
        assert_eq!(history.best_round, 1);
        assert_eq!(history.rounds_trained, 11);
        assert_eq!(model.trees.len(), 1);
    }

    #[test]
    fn classifier_separates_two_classes() {
        let features: Vec<Vec<f64>> = (0..100).map(|i| vec![(i % 2) as f64 * 10.0]).collect();
        let classes: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let config = GbtConfig {
            rounds: 30,
            ..GbtConfig::default()
        };
        let (model, _) =
            train_classifier(&features, &classes, &features, &classes, 2, &config, LAYOUT)
                .unwrap();
        let mut correct = 0;
        for (f, &y) in features.iter().zip(&classes) {
            let (pred, probs) = model.predict_class(f, LAYOUT).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if pred == y {
                correct += 1;
            }
        }
        assert_eq!(correct, 100);
    }

    #[test]
    fn classifier_rejects_degenerate_class_sets() {
        let features: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let classes = vec![0usize; 10];
        let err = train_classifier(
            &features,
            &classes,
            &features,
            &classes,
            2,
            &GbtConfig::default(),
            LAYOUT,
        )
        .unwrap_err();
        assert!(matches!(err, GbtError::ClassAbsent(1)));
        let classes_oor = vec![0usize, 5, 0, 0, 0, 0, 0, 0, 0, 1];
        assert!(matches!(
            train_classifier(
                &features,
                &classes_oor,
                &features,
                &classes_oor,
                2,
                &GbtConfig::default(),
                LAYOUT,
            ),
            Err(GbtError::ClassOutOfRange { class: 5, .. })
        ));
    }

    #[test]
    fn predictions_are_deterministic_and_survive_serialization() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let features: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..5).map(|_| rng.random_range(0.0..10.0)).collect())
            .collect();
        let labels: Vec<f64> = features.iter().map(|f| f[1] * 0.5 + f[3]).collect();
        let (model, _) = train_regression(
            &features,
            &labels,
            &features[..50].to_vec(),
            &labels[..50].to_vec(),
            &GbtConfig {
                rounds: 25,
                ..GbtConfig::default()
            },
            LAYOUT,
        )
        .unwrap();
        let json = model.to_json();
        let reloaded = GbtModel::from_json(&json).unwrap();
        assert_eq!(reloaded.to_json(), json);
        let probe: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..5).map(|_| rng.random_range(-5.0..15.0)).collect())
            .collect();
        for x in &probe {
            let a = model.predict_regression(x, LAYOUT).unwrap();
            let b = model.predict_regression(x, LAYOUT).unwrap();
            let c = reloaded.predict_regression(x, LAYOUT).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let (features, labels) = constant_dataset(16, 1.0);
        let (model, _) = train_regression(
            &features,
            &labels,
            &features,
            &labels,
            &GbtConfig::default(),
            LAYOUT,
        )
        .unwrap();
        assert!(matches!(
            model.predict_regression(&[0.0, 0.0], "other-layout"),
            Err(GbtError::LayoutMismatch { .. })
        ));
        assert!(matches!(
            model.predict_regression(&[0.0], LAYOUT),
            Err(GbtError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn scaling_a_feature_by_two_leaves_predictions_unchanged() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let features: Vec<Vec<f64>> = (0..150)
            .map(|_| vec![rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)])
            .collect();
        let labels: Vec<f64> = features.iter().map(|f| f[0] * 1.5 - f[1]).collect();
        let scaled: Vec<Vec<f64>> = features.iter().map(|f| vec![f[0] * 2.0, f[1]]).collect();
        let config = GbtConfig {
            rounds: 15,
            early_stopping_rounds: 20,
            ..GbtConfig::default()
        };
        let (model_a, _) =
            train_regression(&features, &labels, &features, &labels, &config, LAYOUT).unwrap();
        let (model_b, _) =
            train_regression(&scaled, &labels, &scaled, &labels, &config, LAYOUT).unwrap();
        for (x, sx) in features.iter().zip(&scaled) {
            let a = model_a.predict_regression(x, LAYOUT).unwrap();
            let b = model_b.predict_regression(sx, LAYOUT).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_empty_and_non_finite_input() {
        assert!(matches!(
            train_regression(&[], &[], &[], &[], &GbtConfig::default(), LAYOUT),
            Err(GbtError::EmptyInput)
        ));
        let features = vec![vec![1.0], vec![f64::NAN]];
        let labels = vec![1.0, 2.0];
        assert!(matches!(
            train_regression(
                &features,
                &labels,
                &features,
                &labels,
                &GbtConfig::default(),
                LAYOUT
            ),
            Err(GbtError::NonFiniteFeature { row: 1, col: 0 })
        ));
    }
}
