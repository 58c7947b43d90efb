//! Tree-attention model: a transformer over plan nodes with height
//! embeddings instead of positional encodings, additive per-head tree-bias
//! terms indexed by clamped pairwise tree distance, a descendant-only
//! attention mask, and a super node whose output feeds the plan-level head.
//! Per-node outputs feed a two-value head (rows, bytes) for multi-task
//! training.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{NodeId, ParamStore, Tape, Tensor};
use super::{NeuralError, NeuralInput};
use crate::encoding::EncodingSpace;

/// Output head shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Regression,
    Classification { n_classes: usize },
}

impl OutputKind {
    pub fn width(&self) -> usize {
        match self {
            OutputKind::Regression => 1,
            OutputKind::Classification { n_classes } => *n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_height: usize,
    pub max_dist: usize,
    pub max_nodes: usize,
    pub output: OutputKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: 64,
            max_height: 16,
            max_dist: 16,
            max_nodes: 512,
            output: OutputKind::Regression,
            seed: 0,
        }
    }
}

impl ModelConfig {
    fn check(&self) -> Result<(), NeuralError> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.ffn_dim == 0
            || self.max_nodes == 0
        {
            return Err(NeuralError::InvalidConfig("all dims must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(NeuralError::InvalidConfig(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 5 {
            return Err(NeuralError::InvalidConfig(
                "d_model must be >= 5 (one slice per encoding component)".into(),
            ));
        }
        if let OutputKind::Classification { n_classes } = self.output {
            if n_classes < 2 {
                return Err(NeuralError::InvalidConfig("need at least 2 classes".into()));
            }
        }
        Ok(())
    }

    /// Distance-code vocabulary: 0..=max_dist plus the reserved super-node
    /// code.
    pub fn n_dist_codes(&self) -> usize {
        self.max_dist + 2
    }
}

/// Encoding-space dimensions the parameter shapes depend on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceDims {
    pub n_operators: usize,
    pub n_datatypes: usize,
    pub n_tables: usize,
    pub n_slots: usize,
}

impl SpaceDims {
    pub fn from_space(space: &EncodingSpace) -> Self {
        SpaceDims {
            n_operators: space.n_operators(),
            n_datatypes: space.n_datatypes(),
            n_tables: space.table_dictionary.len(),
            n_slots: space.n_slots(),
        }
    }
}

struct LayerHandles {
    wq: Vec<usize>,
    wk: Vec<usize>,
    wv: Vec<usize>,
    bias: Vec<usize>,
    wo: usize,
    bo: usize,
    ln1_gain: usize,
    ln1_bias: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    ln2_gain: usize,
    ln2_bias: usize,
}

struct Handles {
    op_embed: usize,
    layout_w: usize,
    layout_b: usize,
    table_embed: usize,
    strat_w: usize,
    strat_b: usize,
    stats_w: usize,
    stats_b: usize,
    super_token: usize,
    height_embed: usize,
    layers: Vec<LayerHandles>,
    plan_w: usize,
    plan_b: usize,
    node_w: usize,
    node_b: usize,
}

/// Widths of the five per-component input projections; they concatenate to
/// exactly `d_model` (remainder spread over the first components).
fn component_widths(d_model: usize) -> [usize; 5] {
    let base = d_model / 5;
    let rem = d_model - base * 5;
    let mut widths = [base; 5];
    for (i, w) in widths.iter_mut().enumerate() {
        if i < rem {
            *w += 1;
        }
    }
    widths
}

pub struct TreeAttentionModel {
    pub config: ModelConfig,
    pub dims: SpaceDims,
    pub space_version: String,
    pub params: ParamStore,
    handles: Handles,
}

/// Everything the forward pass produces for one plan.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Regression value (length 1) or class logits (length K), from the
    /// super node.
    pub plan_out: Vec<f64>,
    /// n x 2 normalized (out_rows, out_bytes) estimates for real nodes.
    pub node_outs: Vec<f64>,
    /// (n + 1) x d_model final representations, super node first.
    pub trunk: Vec<f64>,
}

impl TreeAttentionModel {
    pub fn new(config: ModelConfig, space: &EncodingSpace) -> Result<Self, NeuralError> {
        Self::build(config, SpaceDims::from_space(space), space.version_hash())
    }

    fn build(
        config: ModelConfig,
        dims: SpaceDims,
        space_version: String,
    ) -> Result<Self, NeuralError> {
        config.check()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let [d_t, d_l, d_tn, d_s, d_is] = component_widths(d);

        let mut linear = |store: &mut ParamStore, name: &str, rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let values = (0..rows * cols)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            store.add(name, Tensor::from_values(&[rows, cols], values))
        };

        let op_embed = linear(&mut store, "op_embed", dims.n_operators, d_t);
        let layout_w = linear(&mut store, "layout_w", dims.n_datatypes.max(1), d_l);
        let layout_b = store.add("layout_b", Tensor::zeros(&[1, d_l]));
        let table_embed = linear(&mut store, "table_embed", dims.n_tables + 1, d_tn);
        let strat_w = linear(&mut store, "strat_w", dims.n_slots.max(1), d_s);
        let strat_b = store.add("strat_b", Tensor::zeros(&[1, d_s]));
        let stats_w = linear(&mut store, "stats_w", 2, d_is);
        let stats_b = store.add("stats_b", Tensor::zeros(&[1, d_is]));
        let super_token = linear(&mut store, "super_token", 1, d);
        let height_embed = linear(&mut store, "height_embed", config.max_height + 1, d);

        let dh = d / config.n_heads;
        let mut layers = Vec::with_capacity(config.n_layers);
        for layer in 0..config.n_layers {
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            let mut bias = Vec::new();
            for head in 0..config.n_heads {
                wq.push(linear(&mut store, &format!("l{layer}.h{head}.wq"), d, dh));
                wk.push(linear(&mut store, &format!("l{layer}.h{head}.wk"), d, dh));
                wv.push(linear(&mut store, &format!("l{layer}.h{head}.wv"), d, dh));
                bias.push(store.add(
                    &format!("l{layer}.h{head}.tree_bias"),
                    Tensor::zeros(&[1, config.n_dist_codes()]),
                ));
            }
            let wo = linear(&mut store, &format!("l{layer}.wo"), d, d);
            let bo = store.add(&format!("l{layer}.bo"), Tensor::zeros(&[1, d]));
            let ln1_gain = store.add(
                &format!("l{layer}.ln1_gain"),
                Tensor::from_values(&[1, d], vec![1.0; d]),
            );
            let ln1_bias = store.add(&format!("l{layer}.ln1_bias"), Tensor::zeros(&[1, d]));
            let ffn_w1 = linear(&mut store, &format!("l{layer}.ffn_w1"), d, config.ffn_dim);
            let ffn_b1 = store.add(
                &format!("l{layer}.ffn_b1"),
                Tensor::zeros(&[1, config.ffn_dim]),
            );
            let ffn_w2 = linear(&mut store, &format!("l{layer}.ffn_w2"), config.ffn_dim, d);
            let ffn_b2 = store.add(&format!("l{layer}.ffn_b2"), Tensor::zeros(&[1, d]));
            let ln2_gain = store.add(
                &format!("l{layer}.ln2_gain"),
                Tensor::from_values(&[1, d], vec![1.0; d]),
            );
            let ln2_bias = store.add(&format!("l{layer}.ln2_bias"), Tensor::zeros(&[1, d]));
            layers.push(LayerHandles {
                wq,
                wk,
                wv,
                bias,
                wo,
                bo,
                ln1_gain,
                ln1_bias,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                ln2_gain,
                ln2_bias,
            });
        }

        let out_width = config.output.width();
        let plan_w = linear(&mut store, "plan_head_w", d, out_width);
        let plan_b = store.add("plan_head_b", Tensor::zeros(&[1, out_width]));
        let node_w = linear(&mut store, "node_head_w", d, 2);
        let node_b = store.add("node_head_b", Tensor::zeros(&[1, 2]));

        Ok(TreeAttentionModel {
            config,
            dims,
            space_version,
            params: store,
            handles: Handles {
                op_embed,
                layout_w,
                layout_b,
                table_embed,
                strat_w,
                strat_b,
                stats_w,
                stats_b,
                super_token,
                height_embed,
                layers,
                plan_w,
                plan_b,
                node_w,
                node_b,
            },
        })
    }

    pub fn check_input(&self, input: &NeuralInput) -> Result<(), NeuralError> {
        if input.space_version != self.space_version {
            return Err(NeuralError::SpaceVersionMismatch {
                expected: self.space_version.clone(),
                got: input.space_version.clone(),
            });
        }
        if input.n > self.config.max_nodes {
            return Err(NeuralError::TooManyNodes {
                n: input.n,
                max: self.config.max_nodes,
            });
        }
        if input.max_height != self.config.max_height || input.max_dist != self.config.max_dist {
            return Err(NeuralError::ClampMismatch {
                model: (self.config.max_height, self.config.max_dist),
                input: (input.max_height, input.max_dist),
            });
        }
        Ok(())
    }

    /// Builds the trunk and both heads on a tape; returns (plan, nodes,
    /// trunk) node ids.
    pub(super) fn build_graph(
        &self,
        tape: &mut Tape,
        input: &NeuralInput,
    ) -> (NodeId, NodeId, NodeId) {
        let h = &self.handles;
        let n = input.n;
        let d = self.config.d_model;

        let op_table = tape.param(h.op_embed);
        let op_part = tape.gather_rows(op_table, input.kind_idx.clone());
        let layout_in = tape.input(n, self.dims.n_datatypes, input.layout.clone());
        let layout_w = tape.param(h.layout_w);
        let layout_b = tape.param(h.layout_b);
        let layout_mm = tape.matmul(layout_in, layout_w);
        let layout_part = tape.add_row(layout_mm, layout_b);
        let table_table = tape.param(h.table_embed);
        let table_part = tape.gather_rows(table_table, input.table_idx.clone());
        let strat_in = tape.input(n, self.dims.n_slots, input.strat.clone());
        let strat_w = tape.param(h.strat_w);
        let strat_b = tape.param(h.strat_b);
        let strat_mm = tape.matmul(strat_in, strat_w);
        let strat_part = tape.add_row(strat_mm, strat_b);
        let stats_in = tape.input(n, 2, input.stats.clone());
        let stats_w = tape.param(h.stats_w);
        let stats_b = tape.param(h.stats_b);
        let stats_mm = tape.matmul(stats_in, stats_w);
        let stats_part = tape.add_row(stats_mm, stats_b);
        let node_embed =
            tape.concat_cols(vec![op_part, layout_part, table_part, strat_part, stats_part]);

        let super_tok = tape.param(h.super_token);
        let full = tape.concat_rows(vec![super_tok, node_embed]);
        // The super node has no height; it adds a zero row instead.
        let height_table = tape.param(h.height_embed);
        let height_real = tape.gather_rows(height_table, input.heights.clone());
        let zero_row = tape.input(1, d, vec![0.0; d]);
        let height_full = tape.concat_rows(vec![zero_row, height_real]);
        let mut x = tape.add(full, height_full);

        let mask = Rc::new(input.mask.clone());
        let codes = Rc::new(input.dist_codes.clone());
        let dh = d / self.config.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &h.layers {
            let mut head_outs = Vec::with_capacity(self.config.n_heads);
            for head in 0..self.config.n_heads {
                let wq = tape.param(layer.wq[head]);
                let wk = tape.param(layer.wk[head]);
                let wv = tape.param(layer.wv[head]);
                let q = tape.matmul(x, wq);
                let k = tape.matmul(x, wk);
                let v = tape.matmul(x, wv);
                let raw = tape.matmul_nt(q, k);
                let scaled = tape.scale(raw, scale);
                let bias_row = tape.param(layer.bias[head]);
                let biased = tape.bias_by_code(scaled, bias_row, Rc::clone(&codes));
                let masked = tape.mask_fill(biased, Rc::clone(&mask));
                let attn = tape.softmax_rows(masked);
                head_outs.push(tape.matmul(attn, v));
            }
            let concat = tape.concat_cols(head_outs);
            let wo = tape.param(layer.wo);
            let bo = tape.param(layer.bo);
            let proj_mm = tape.matmul(concat, wo);
            let proj = tape.add_row(proj_mm, bo);
            let res1 = tape.add(x, proj);
            let ln1_gain = tape.param(layer.ln1_gain);
            let ln1_bias = tape.param(layer.ln1_bias);
            let x1 = tape.layer_norm(res1, ln1_gain, ln1_bias);
            let w1 = tape.param(layer.ffn_w1);
            let b1 = tape.param(layer.ffn_b1);
            let f1_mm = tape.matmul(x1, w1);
            let f1 = tape.add_row(f1_mm, b1);
            let act = tape.gelu(f1);
            let w2 = tape.param(layer.ffn_w2);
            let b2 = tape.param(layer.ffn_b2);
            let f2_mm = tape.matmul(act, w2);
            let f2 = tape.add_row(f2_mm, b2);
            let res2 = tape.add(x1, f2);
            let ln2_gain = tape.param(layer.ln2_gain);
            let ln2_bias = tape.param(layer.ln2_bias);
            x = tape.layer_norm(res2, ln2_gain, ln2_bias);
        }

        let super_row = tape.gather_rows(x, vec![0]);
        let plan_w = tape.param(h.plan_w);
        let plan_b = tape.param(h.plan_b);
        let plan_mm = tape.matmul(super_row, plan_w);
        let plan_out = tape.add_row(plan_mm, plan_b);
        let real_rows = tape.gather_rows(x, (1..=n).collect());
        let node_w = tape.param(h.node_w);
        let node_b = tape.param(h.node_b);
        let node_mm = tape.matmul(real_rows, node_w);
        let node_outs = tape.add_row(node_mm, node_b);
        (plan_out, node_outs, x)
    }

    /// Inference forward pass. Deterministic given parameters and input;
    /// identical to the forward pass used in training.
    pub fn forward(&self, input: &NeuralInput) -> Result<ForwardOutput, NeuralError> {
        self.check_input(input)?;
        let mut tape = Tape::new(&self.params);
        let (plan, nodes, trunk) = self.build_graph(&mut tape, input);
        Ok(ForwardOutput {
            plan_out: tape.value(plan).to_vec(),
            node_outs: tape.value(nodes).to_vec(),
            trunk: tape.value(trunk).to_vec(),
        })
    }

    /// Serializes config, dims, space version, and all parameters.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct CheckpointOut<'a> {
            format_version: u32,
            config: &'a ModelConfig,
            dims: &'a SpaceDims,
            space_version: &'a str,
            params: &'a ParamStore,
        }
        serde_json::to_string(&CheckpointOut {
            format_version: 1,
            config: &self.config,
            dims: &self.dims,
            space_version: &self.space_version,
            params: &self.params,
        })
        .expect("checkpoint serialization cannot fail")
    }

    /// Restores a model from [`to_json`](Self::to_json) output bit-exactly.
    pub fn from_json(json: &str) -> Result<Self, NeuralError> {
        #[derive(Deserialize)]
        struct CheckpointIn {
            format_version: u32,
            config: ModelConfig,
            dims: SpaceDims,
            space_version: String,
            params: ParamStore,
        }
        let ckpt: CheckpointIn =
            serde_json::from_str(json).map_err(|e| NeuralError::BadSerialization(e.to_string()))?;
        if ckpt.format_version != 1 {
            return Err(NeuralError::BadSerialization(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        let mut model = Self::build(ckpt.config, ckpt.dims, ckpt.space_version)?;
        if model.params.names != ckpt.params.names {
            return Err(NeuralError::BadSerialization(
                "checkpoint parameter names do not match the config".into(),
            ));
        }
        for (built, loaded) in model.params.tensors.iter().zip(&ckpt.params.tensors) {
            if built.shape != loaded.shape {
                return Err(NeuralError::BadSerialization(
                    "checkpoint parameter shapes do not match the config".into(),
                ));
            }
        }
        model.params = ckpt.params;
        Ok(model)
    }
}
