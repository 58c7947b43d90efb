//! Tree-attention model with multi-task heads, plus the autodiff core and
//! training loop behind it.
//!
//! Training minimizes `loss = plan_loss + lambda * node_loss`: the plan
//! head is scored against the normalized plan label (squared error, or
//! cross-entropy for classification) and the node head against normalized
//! per-operator metrics wherever the log recorded them. The optimizer is
//! adaptive moment estimation with fixed defaults and a global-norm
//! gradient clip; everything is deterministic given the seed.

pub mod model;
pub mod tensor;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{ForwardOutput, ModelConfig, OutputKind, SpaceDims, TreeAttentionModel};
pub use tensor::{ParamStore, Tape, Tensor};

use crate::encoding::{
    encode_plan_structural, EncodingError, EncodingSpace, LabelNormalizer, PlanEncoding,
    StructuralParams,
};
use crate::eval::quantile;
use crate::plan::{binarize, QueryRecord};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("encoding-space version mismatch: model built on {expected}, input from {got}")]
    SpaceVersionMismatch { expected: String, got: String },
    #[error("plan has {n} nodes, above the model maximum of {max}")]
    TooManyNodes { n: usize, max: usize },
    #[error("clamp mismatch: model (max_height, max_dist) = {model:?}, input = {input:?}")]
    ClampMismatch {
        model: (usize, usize),
        input: (usize, usize),
    },
    #[error("training set is empty")]
    EmptyInput,
    #[error("lambda must be >= 0, got {0}")]
    NegativeLambda(f64),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("checkpoint deserialization failed: {0}")]
    BadSerialization(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// A plan's structural encoding rearranged for the model: embedding codes,
/// dense component matrices, distance codes, and the attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralInput {
    pub n: usize,
    pub kind_idx: Vec<usize>,
    pub table_idx: Vec<usize>,
    /// n x n_datatypes layout counts.
    pub layout: Vec<f64>,
    /// n x n_slots strategy indicators.
    pub strat: Vec<f64>,
    /// n x 2 normalized input statistics.
    pub stats: Vec<f64>,
    pub heights: Vec<usize>,
    /// (n+1)^2 clamped distance codes, super links at max_dist + 1.
    pub dist_codes: Vec<u32>,
    /// (n+1)^2 attention mask.
    pub mask: Vec<bool>,
    pub max_height: usize,
    pub max_dist: usize,
    pub space_version: String,
}

impl NeuralInput {
    pub fn from_encoding(encoding: &PlanEncoding) -> Self {
        let n = encoding.n;
        let mut kind_idx = Vec::with_capacity(n);
        let mut table_idx = Vec::with_capacity(n);
        let mut layout = Vec::new();
        let mut strat = Vec::new();
        let mut stats = Vec::with_capacity(n * 2);
        for node in &encoding.nodes {
            let hot = node
                .e_t
                .iter()
                .position(|&v| v == 1.0)
                .expect("one-hot invariant");
            kind_idx.push(hot);
            table_idx.push(node.e_tn);
            layout.extend_from_slice(&node.e_l);
            strat.extend_from_slice(&node.e_s);
            stats.extend_from_slice(&node.e_is);
        }
        NeuralInput {
            n,
            kind_idx,
            table_idx,
            layout,
            strat,
            stats,
            heights: encoding.height.clone(),
            dist_codes: encoding.dist.clone(),
            mask: encoding.attend_mask.clone(),
            max_height: encoding.max_height,
            max_dist: encoding.max_dist,
            space_version: encoding.space_version.clone(),
        }
    }
}

/// One training/evaluation sample.
#[derive(Debug, Clone)]
pub struct NeuralExample {
    pub input: NeuralInput,
    /// Normalized plan label (regression target).
    pub plan_target_norm: f64,
    /// Plan label in natural units, for q-error metrics.
    pub plan_label_raw: f64,
    /// Class index (classification target; 0 for regression).
    pub class: usize,
    /// n x 2 normalized (out_rows, out_bytes) targets; 0 where masked out.
    pub node_targets: Vec<f64>,
    /// n x 2 mask, true where the log recorded the metric.
    pub node_mask: Vec<bool>,
}

/// Normalizers for the two operator-level metrics, fitted on training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricNormalizers {
    pub out_rows: LabelNormalizer,
    pub out_bytes: LabelNormalizer,
}

impl MetricNormalizers {
    /// Fits min-max log normalizers over all node metrics in `records`.
    pub fn fit(records: &[QueryRecord]) -> Result<Self, EncodingError> {
        let mut rows = Vec::new();
        let mut bytes = Vec::new();
        for record in records {
            for node in record.plan.preorder() {
                if let Some(m) = node.metrics {
                    rows.push((m.out_rows as f64).max(1e-9));
                    bytes.push((m.out_bytes as f64).max(1e-9));
                }
            }
        }
        Ok(MetricNormalizers {
            out_rows: LabelNormalizer::fit_min_max_log(&rows)?,
            out_bytes: LabelNormalizer::fit_min_max_log(&bytes)?,
        })
    }
}

impl NeuralExample {
    /// Builds a sample from a record: binarize, encode, normalize labels and
    /// node metrics. For classification pass the class index, otherwise the
    /// normalized plan label is the regression target.
    pub fn build(
        record: &QueryRecord,
        space: &EncodingSpace,
        params: &StructuralParams,
        label_raw: f64,
        plan_target_norm: f64,
        class: usize,
        metrics: &MetricNormalizers,
    ) -> Result<Self, NeuralError> {
        let plan = binarize(&record.plan);
        let encoding = encode_plan_structural(&plan, space, params)?;
        let input = NeuralInput::from_encoding(&encoding);
        let mut node_targets = vec![0.0; input.n * 2];
        let mut node_mask = vec![false; input.n * 2];
        for (pos, node) in plan.preorder().iter().enumerate() {
            if let Some(m) = node.metrics {
                node_targets[pos * 2] = metrics
                    .out_rows
                    .normalize((m.out_rows as f64).max(1e-9))
                    .expect("positive after clamp");
                node_targets[pos * 2 + 1] = metrics
                    .out_bytes
                    .normalize((m.out_bytes as f64).max(1e-9))
                    .expect("positive after clamp");
                node_mask[pos * 2] = true;
                node_mask[pos * 2 + 1] = true;
            }
        }
        Ok(NeuralExample {
            input,
            plan_target_norm,
            plan_label_raw: label_raw,
            class,
            node_targets,
            node_mask,
        })
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

fn node_loss(node_outs: &[f64], node_labels: &[f64], node_mask: &[bool]) -> f64 {
    let count = node_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return 0.0;
    }
    node_outs
        .iter()
        .zip(node_labels)
        .zip(node_mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| (p - t) * (p - t))
        .sum::<f64>()
        / count as f64
}

/// Combined regression loss: squared error on the normalized plan label
/// plus `lambda` times the mean squared error over masked node outputs.
pub fn regression_loss(
    plan_out: f64,
    plan_label: f64,
    node_outs: &[f64],
    node_labels: &[f64],
    node_mask: &[bool],
    lambda: f64,
) -> Result<f64, NeuralError> {
    if lambda < 0.0 {
        return Err(NeuralError::NegativeLambda(lambda));
    }
    let d = plan_out - plan_label;
    Ok(d * d + lambda * node_loss(node_outs, node_labels, node_mask))
}

/// Combined classification loss: cross-entropy on the plan class plus
/// `lambda` times the masked node loss.
pub fn classification_loss(
    logits: &[f64],
    class: usize,
    node_outs: &[f64],
    node_labels: &[f64],
    node_mask: &[bool],
    lambda: f64,
) -> Result<f64, NeuralError> {
    if lambda < 0.0 {
        return Err(NeuralError::NegativeLambda(lambda));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[class] + lambda * node_loss(node_outs, node_labels, node_mask))
}

impl TreeAttentionModel {
    fn build_loss(&self, tape: &mut Tape, example: &NeuralExample, lambda: f64) -> usize {
        let (plan, nodes, _) = self.build_graph(tape, &example.input);
        let l1 = match self.config.output {
            OutputKind::Regression => tape.squared_error(plan, example.plan_target_norm),
            OutputKind::Classification { .. } => tape.cross_entropy(plan, example.class),
        };
        let l2 = tape.masked_mse(
            nodes,
            std::rc::Rc::new(example.node_targets.clone()),
            std::rc::Rc::new(example.node_mask.clone()),
        );
        tape.add_scaled(l1, l2, lambda)
    }

    /// Loss of one sample under the current parameters.
    pub fn loss_value(&self, example: &NeuralExample, lambda: f64) -> Result<f64, NeuralError> {
        if lambda < 0.0 {
            return Err(NeuralError::NegativeLambda(lambda));
        }
        self.check_input(&example.input)?;
        let mut tape = Tape::new(&self.params);
        let loss = self.build_loss(&mut tape, example, lambda);
        Ok(tape.value(loss)[0])
    }

    /// Loss plus gradient accumulation into `grads` (shaped like
    /// [`ParamStore::zero_grads`]).
    pub fn accumulate_loss_grad(
        &self,
        example: &NeuralExample,
        lambda: f64,
        grads: &mut [Vec<f64>],
    ) -> Result<f64, NeuralError> {
        self.check_input(&example.input)?;
        let mut tape = Tape::new(&self.params);
        let loss = self.build_loss(&mut tape, example, lambda);
        let value = tape.value(loss)[0];
        tape.backward(loss, grads);
        Ok(value)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Training-run hyperparameters. `lambda` weights the node-metric loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 20,
            patience: 3,
            seed: 0,
        }
    }
}

/// What the per-epoch validation metric measures. Both are
/// lower-is-better as recorded in the history (accuracy is negated).
#[derive(Debug, Clone)]
pub enum ValidationMetric {
    /// Median q-error of denormalized plan predictions.
    P50QError(LabelNormalizer),
    /// Negated classification accuracy.
    NegAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    /// 1-based epoch whose parameters the model keeps.
    pub best_epoch: usize,
}

/// Early-stopping bookkeeping: strict improvement resets the counter; after
/// `patience` epochs without improvement training stops at the best
/// snapshot.
#[derive(Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    pub best_epoch: usize,
    wait: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Feeds one epoch's metric; returns true when training should stop.
    pub fn update(&mut self, epoch: usize, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.wait = 0;
            false
        } else {
            self.wait += 1;
            self.wait >= self.patience
        }
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    lr: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const GRAD_CLIP_NORM: f64 = 5.0;
/// Samples per deterministic gradient chunk; fixed so the reduction order
/// never depends on thread count.
const GRAD_CHUNK: usize = 8;

impl Adam {
    fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            m: store.zero_grads(),
            v: store.zero_grads(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (pid, tensor) in store.tensors.iter_mut().enumerate() {
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            for (i, g) in grads[pid].iter().enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.values[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn clip_gradients(grads: &mut [Vec<f64>]) {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&g| g * g)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > GRAD_CLIP_NORM {
        let scale = GRAD_CLIP_NORM / norm;
        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= scale;
        }
    }
}

/// Mean gradient over a batch. Samples are processed in fixed-size chunks
/// whose partial sums merge in index order, so results do not depend on the
/// rayon thread count.
fn batch_gradients(
    model: &TreeAttentionModel,
    examples: &[NeuralExample],
    batch: &[usize],
    lambda: f64,
) -> Result<(Vec<Vec<f64>>, f64), NeuralError> {
    let chunk_results: Vec<Result<(Vec<Vec<f64>>, f64), NeuralError>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = model.params.zero_grads();
            let mut loss_sum = 0.0;
            for &i in chunk {
                loss_sum += model.accumulate_loss_grad(&examples[i], lambda, &mut grads)?;
            }
            Ok((grads, loss_sum))
        })
        .collect();
    let mut total = model.params.zero_grads();
    let mut loss_sum = 0.0;
    for result in chunk_results {
        let (grads, loss) = result?;
        for (dst, src) in total.iter_mut().zip(&grads) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        loss_sum += loss;
    }
    let inv = 1.0 / batch.len() as f64;
    for g in total.iter_mut().flat_map(|g| g.iter_mut()) {
        *g *= inv;
    }
    Ok((total, loss_sum))
}

/// Validation metric over a set; lower is better.
pub fn validation_metric(
    model: &TreeAttentionModel,
    valid: &[NeuralExample],
    metric: &ValidationMetric,
) -> Result<f64, NeuralError> {
    let outputs: Vec<Result<ForwardOutput, NeuralError>> = valid
        .par_iter()
        .map(|ex| model.forward(&ex.input))
        .collect();
    match metric {
        ValidationMetric::P50QError(normalizer) => {
            let mut qerrors = Vec::with_capacity(valid.len());
            for (out, ex) in outputs.into_iter().zip(valid) {
                let pred = normalizer.denormalize(out?.plan_out[0]).max(1e-9);
                qerrors.push(pred.max(ex.plan_label_raw) / pred.min(ex.plan_label_raw));
            }
            Ok(quantile(&qerrors, 0.5).expect("non-empty validation set"))
        }
        ValidationMetric::NegAccuracy => {
            let mut correct = 0usize;
            for (out, ex) in outputs.into_iter().zip(valid) {
                let logits = out?.plan_out;
                let mut best = 0;
                for (j, &v) in logits.iter().enumerate() {
                    if v > logits[best] {
                        best = j;
                    }
                }
                if best == ex.class {
                    correct += 1;
                }
            }
            Ok(-(correct as f64) / valid.len() as f64)
        }
    }
}

/// Mini-batch training with early stopping on the validation metric.
/// Returns the per-epoch history; the model keeps the best-epoch snapshot.
pub fn train(
    model: &mut TreeAttentionModel,
    train_set: &[NeuralExample],
    valid_set: &[NeuralExample],
    config: &TrainConfig,
    metric: &ValidationMetric,
) -> Result<TrainOutcome, NeuralError> {
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(NeuralError::EmptyInput);
    }
    if config.lambda < 0.0 {
        return Err(NeuralError::NegativeLambda(config.lambda));
    }
    if config.batch_size == 0 || config.patience == 0 {
        return Err(NeuralError::InvalidConfig(
            "batch_size and patience must be >= 1".into(),
        ));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best_params: Option<ParamStore> = None;
    let mut history = Vec::new();

    for epoch in 1..=config.max_epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in indices.chunks(config.batch_size) {
            let (mut grads, batch_loss) =
                batch_gradients(model, train_set, batch, config.lambda)?;
            if !batch_loss.is_finite() {
                return Err(NeuralError::Divergence { epoch });
            }
            clip_gradients(&mut grads);
            adam.step(&mut model.params, &grads);
            loss_sum += batch_loss;
        }
        let valid_metric = validation_metric(model, valid_set, metric)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            valid_metric,
        });
        let improved = valid_metric < stopper.best;
        let stop = stopper.update(epoch, valid_metric);
        if improved {
            best_params = Some(model.params.clone());
        }
        if stop {
            break;
        }
    }

    if let Some(params) = best_params {
        model.params = params;
    }
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch,
    })
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compares analytic gradients against central finite differences on every
/// parameter and returns the maximum relative error
/// `|g - g_num| / max(1e-6, |g|, |g_num|)`.
pub fn gradient_check(
    model: &mut TreeAttentionModel,
    example: &NeuralExample,
    lambda: f64,
    epsilon: f64,
) -> Result<f64, NeuralError> {
    let mut analytic = model.params.zero_grads();
    model.accumulate_loss_grad(example, lambda, &mut analytic)?;

    let mut max_rel = 0.0;
    for pid in 0..model.params.tensors.len() {
        for i in 0..model.params.tensors[pid].numel() {
            let original = model.params.tensors[pid].values[i];
            model.params.tensors[pid].values[i] = original + epsilon;
            let plus = model.loss_value(example, lambda)?;
            model.params.tensors[pid].values[i] = original - epsilon;
            let minus = model.loss_value(example, lambda)?;
            model.params.tensors[pid].values[i] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let g = analytic[pid][i];
            let rel = (g - numeric).abs() / (1e-6f64).max(g.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
