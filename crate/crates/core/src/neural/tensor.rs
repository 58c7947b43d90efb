//! A compact reverse-mode autodiff core over dense 2-D tensors.
//!
//! A [`Tape`] records tensor-level operations during the forward pass and
//! replays them in reverse to accumulate gradients. Parameters live outside
//! the tape in a [`ParamStore`]; leaf nodes reference them by index so a
//! fresh tape per sample never copies weights. Everything is `f64` and
//! strictly deterministic: no threading inside a tape, no iteration over
//! unordered maps.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

/// Dense row-major tensor with an optional gradient buffer of equal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }
}

/// Named parameter tensors with gradient accumulators.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> usize {
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        id
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Fresh zeroed gradient buffers, one per parameter tensor.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect()
    }
}

pub type NodeId = usize;

/// Fill value for masked-out attention logits. Large enough that the
/// resulting weight underflows to zero, small enough to stay finite.
pub const MASK_FILL: f64 = -1e30;

#[derive(Debug)]
enum Op {
    /// Leaf referencing a parameter tensor.
    Param(usize),
    /// Leaf holding constant input values.
    Input,
    /// a @ b
    MatMul(NodeId, NodeId),
    /// a @ b^T
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// (m, n) + broadcast (1, n)
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    GatherRows {
        table: NodeId,
        rows: Rc<Vec<usize>>,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// scores + bias_row[codes], elementwise over the score matrix.
    BiasByCode {
        scores: NodeId,
        bias_row: NodeId,
        codes: Rc<Vec<u32>>,
    },
    /// x where mask, MASK_FILL elsewhere.
    MaskFill {
        x: NodeId,
        mask: Rc<Vec<bool>>,
    },
    /// (pred - target)^2 for a (1, 1) pred.
    SquaredError {
        pred: NodeId,
        target: f64,
    },
    /// Mean of (pred - target)^2 over masked entries; 0 when none are set.
    MaskedMse {
        pred: NodeId,
        targets: Rc<Vec<f64>>,
        mask: Rc<Vec<bool>>,
    },
    /// Cross-entropy of a (1, K) logit row against a class index.
    CrossEntropy {
        logits: NodeId,
        class: usize,
    },
    /// a + factor * b on scalars.
    AddScaled {
        a: NodeId,
        b: NodeId,
        factor: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation over a parameter store.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(128),
        }
    }

    fn vals(&self, id: NodeId) -> &[f64] {
        match self.nodes[id].op {
            Op::Param(pid) => &self.store.tensors[pid].values,
            _ => &self.nodes[id].value.values,
        }
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let shape = match self.nodes[id].op {
            Op::Param(pid) => &self.store.tensors[pid].shape,
            _ => &self.nodes[id].value.shape,
        };
        (shape[0], shape[1])
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        self.vals(id)
    }

    pub fn shape_of(&self, id: NodeId) -> (usize, usize) {
        self.dims(id)
    }

    fn push(&mut self, shape: [usize; 2], values: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape[0] * shape[1], values.len());
        self.nodes.push(Node {
            value: Tensor {
                shape: shape.to_vec(),
                values,
                grad: None,
            },
            op,
        });
        self.nodes.len() - 1
    }

    pub fn param(&mut self, pid: usize) -> NodeId {
        self.nodes.push(Node {
            value: Tensor {
                shape: self.store.tensors[pid].shape.clone(),
                values: Vec::new(),
                grad: None,
            },
            op: Op::Param(pid),
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> NodeId {
        self.push([rows, cols], values, Op::Input)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        debug_assert_eq!(k, k2);
        let out = matmul(self.vals(a), m, k, self.vals(b), n);
        self.push([m, n], out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        debug_assert_eq!(k, k2);
        let out = matmul_nt(self.vals(a), m, k, self.vals(b), n);
        self.push([m, n], out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        debug_assert_eq!(self.dims(b), (m, n));
        let out = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push([m, n], out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        debug_assert_eq!(self.dims(row), (1, n));
        let rv = self.vals(row);
        let out = self
            .vals(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        self.push([m, n], out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let (m, n) = self.dims(a);
        let out = self.vals(a).iter().map(|x| x * factor).collect();
        self.push([m, n], out, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        let out = self.vals(a).iter().map(|&x| gelu(x)).collect();
        self.push([m, n], out, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        let mut out = Vec::with_capacity(m * n);
        for row in self.vals(a).chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let start = out.len();
            for &x in row {
                let e = (x - max).exp();
                out.push(e);
                sum += e;
            }
            for v in &mut out[start..] {
                *v /= sum;
            }
        }
        self.push([m, n], out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.dims(x);
        debug_assert_eq!(self.dims(gain), (1, n));
        debug_assert_eq!(self.dims(bias), (1, n));
        let g = self.vals(gain);
        let b = self.vals(bias);
        let mut out = Vec::with_capacity(m * n);
        for row in self.vals(x).chunks(n) {
            let (mean, rstd) = row_moments(row);
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mean) * rstd * g[j] + b[j]);
            }
        }
        self.push([m, n], out, Op::LayerNorm { x, gain, bias })
    }

    pub fn gather_rows(&mut self, table: NodeId, rows: Vec<usize>) -> NodeId {
        let (_, n) = self.dims(table);
        let tv = self.vals(table);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            out.extend_from_slice(&tv[r * n..(r + 1) * n]);
        }
        let m = rows.len();
        self.push(
            [m, n],
            out,
            Op::GatherRows {
                table,
                rows: Rc::new(rows),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let m = self.dims(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in &parts {
                let (pm, pn) = self.dims(p);
                debug_assert_eq!(pm, m);
                out.extend_from_slice(&self.vals(p)[i * pn..(i + 1) * pn]);
            }
        }
        self.push([m, total], out, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let n = self.dims(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(total * n);
        for &p in &parts {
            debug_assert_eq!(self.dims(p).1, n);
            out.extend_from_slice(self.vals(p));
        }
        self.push([total, n], out, Op::ConcatRows(parts))
    }

    pub fn bias_by_code(&mut self, scores: NodeId, bias_row: NodeId, codes: Rc<Vec<u32>>) -> NodeId {
        let (m, n) = self.dims(scores);
        debug_assert_eq!(m * n, codes.len());
        let bias = self.vals(bias_row);
        let out = self
            .vals(scores)
            .iter()
            .zip(codes.iter())
            .map(|(&s, &c)| s + bias[c as usize])
            .collect();
        self.push(
            [m, n],
            out,
            Op::BiasByCode {
                scores,
                bias_row,
                codes,
            },
        )
    }

    pub fn mask_fill(&mut self, x: NodeId, mask: Rc<Vec<bool>>) -> NodeId {
        let (m, n) = self.dims(x);
        debug_assert_eq!(m * n, mask.len());
        let out = self
            .vals(x)
            .iter()
            .zip(mask.iter())
            .map(|(&v, &keep)| if keep { v } else { MASK_FILL })
            .collect();
        self.push([m, n], out, Op::MaskFill { x, mask })
    }

    pub fn squared_error(&mut self, pred: NodeId, target: f64) -> NodeId {
        debug_assert_eq!(self.dims(pred), (1, 1));
        let d = self.vals(pred)[0] - target;
        self.push([1, 1], vec![d * d], Op::SquaredError { pred, target })
    }

    pub fn masked_mse(
        &mut self,
        pred: NodeId,
        targets: Rc<Vec<f64>>,
        mask: Rc<Vec<bool>>,
    ) -> NodeId {
        let (m, n) = self.dims(pred);
        debug_assert_eq!(m * n, targets.len());
        debug_assert_eq!(m * n, mask.len());
        let count = mask.iter().filter(|&&b| b).count();
        let value = if count == 0 {
            0.0
        } else {
            self.vals(pred)
                .iter()
                .zip(targets.iter())
                .zip(mask.iter())
                .filter(|(_, &keep)| keep)
                .map(|((&p, &t), _)| (p - t) * (p - t))
                .sum::<f64>()
                / count as f64
        };
        self.push(
            [1, 1],
            vec![value],
            Op::MaskedMse {
                pred,
                targets,
                mask,
            },
        )
    }

    pub fn cross_entropy(&mut self, logits: NodeId, class: usize) -> NodeId {
        let (m, k) = self.dims(logits);
        debug_assert_eq!(m, 1);
        debug_assert!(class < k);
        let z = self.vals(logits);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        self.push([1, 1], vec![lse - z[class]], Op::CrossEntropy { logits, class })
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, factor: f64) -> NodeId {
        debug_assert_eq!(self.dims(a), (1, 1));
        debug_assert_eq!(self.dims(b), (1, 1));
        let v = self.vals(a)[0] + factor * self.vals(b)[0];
        self.push([1, 1], vec![v], Op::AddScaled { a, b, factor })
    }

    /// Reverse sweep from a scalar output. Gradients for parameter leaves
    /// are accumulated into `param_grads` (one buffer per parameter tensor,
    /// as from [`ParamStore::zero_grads`]).
    pub fn backward(&mut self, output: NodeId, param_grads: &mut [Vec<f64>]) {
        debug_assert_eq!(self.dims(output), (1, 1));
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n_nodes).map(|_| None).collect();
        grads[output] = Some(vec![1.0]);

        for id in (0..n_nodes).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            // Split borrows: the node's op and cached value vs. the grads
            // of its inputs.
            match &self.nodes[id].op {
                Op::Param(pid) => {
                    let buf = &mut param_grads[*pid];
                    for (dst, src) in buf.iter_mut().zip(&grad) {
                        *dst += src;
                    }
                }
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.dims(a);
                    let n = self.dims(b).1;
                    let da = matmul_nt(&grad, m, n, self.vals(b), k);
                    let db = matmul_tn(self.vals(a), m, k, &grad, n);
                    add_into(ensure(&mut grads, a, m * k), &da);
                    add_into(ensure(&mut grads, b, k * n), &db);
                }
                Op::MatMulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.dims(a);
                    let n = self.dims(b).0;
                    let da = matmul(&grad, m, n, self.vals(b), k);
                    let db = matmul_tn(&grad, m, n, self.vals(a), k);
                    add_into(ensure(&mut grads, a, m * k), &da);
                    add_into(ensure(&mut grads, b, n * k), &db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let len = grad.len();
                    add_into(ensure(&mut grads, a, len), &grad);
                    add_into(ensure(&mut grads, b, len), &grad);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let (m, n) = self.dims(a);
                    add_into(ensure(&mut grads, a, m * n), &grad);
                    let drow = ensure(&mut grads, row, n);
                    for chunk in grad.chunks(n) {
                        for (d, g) in drow.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                }
                Op::Scale(a, factor) => {
                    let (a, factor) = (*a, *factor);
                    let da = ensure(&mut grads, a, grad.len());
                    for (d, g) in da.iter_mut().zip(&grad) {
                        *d += factor * g;
                    }
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let mut da = vec![0.0; grad.len()];
                    for ((d, g), &x) in da.iter_mut().zip(&grad).zip(self.vals(a)) {
                        *d = g * gelu_derivative(x);
                    }
                    add_into(ensure(&mut grads, a, grad.len()), &da);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let (m, n) = self.dims(id);
                    let y = &self.nodes[id].value.values;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &grad[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            da[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_into(ensure(&mut grads, a, m * n), &da);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let (m, n) = self.dims(x);
                    let xv = self.vals(x);
                    let gv = self.vals(gain);
                    let mut dx = vec![0.0; m * n];
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let grow = &grad[i * n..(i + 1) * n];
                        let (mean, rstd) = row_moments(row);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = grow[j] * gv[j];
                            dgain[j] += grow[j] * xhat;
                            dbias[j] += grow[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = grow[j] * gv[j];
                            dx[i * n + j] = rstd
                                * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                    }
                    add_into(ensure(&mut grads, x, m * n), &dx);
                    add_into(ensure(&mut grads, gain, n), &dgain);
                    add_into(ensure(&mut grads, bias, n), &dbias);
                }
                Op::GatherRows { table, rows } => {
                    let table = *table;
                    let rows = Rc::clone(rows);
                    let (tm, tn) = self.dims(table);
                    let dtable = ensure(&mut grads, table, tm * tn);
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..tn {
                            dtable[r * tn + j] += grad[i * tn + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let m = self.dims(parts[0]).0;
                    let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&part, &w) in parts.iter().zip(&widths) {
                        let dpart = ensure(&mut grads, part, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                dpart[i * w + j] += grad[i * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let n = self.dims(parts[0]).1;
                    let mut offset = 0;
                    for &part in &parts {
                        let pm = self.dims(part).0;
                        let dpart = ensure(&mut grads, part, pm * n);
                        add_into(dpart, &grad[offset * n..(offset + pm) * n]);
                        offset += pm;
                    }
                }
                Op::BiasByCode {
                    scores,
                    bias_row,
                    codes,
                } => {
                    let (scores, bias_row) = (*scores, *bias_row);
                    let codes = Rc::clone(codes);
                    let len = grad.len();
                    add_into(ensure(&mut grads, scores, len), &grad);
                    let bias_len = self.dims(bias_row).1;
                    let dbias = ensure(&mut grads, bias_row, bias_len);
                    for (&g, &c) in grad.iter().zip(codes.iter()) {
                        dbias[c as usize] += g;
                    }
                }
                Op::MaskFill { x, mask } => {
                    let x = *x;
                    let mask = Rc::clone(mask);
                    let dx = ensure(&mut grads, x, grad.len());
                    for ((d, g), &keep) in dx.iter_mut().zip(&grad).zip(mask.iter()) {
                        if keep {
                            *d += g;
                        }
                    }
                }
                Op::SquaredError { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let p = self.vals(pred)[0];
                    let dp = ensure(&mut grads, pred, 1);
                    dp[0] += grad[0] * 2.0 * (p - target);
                }
                Op::MaskedMse {
                    pred,
                    targets,
                    mask,
                } => {
                    let pred = *pred;
                    let targets = Rc::clone(targets);
                    let mask = Rc::clone(mask);
                    let count = mask.iter().filter(|&&b| b).count();
                    if count > 0 {
                        let scale = grad[0] * 2.0 / count as f64;
                        let pv: Vec<f64> = self.vals(pred).to_vec();
                        let dp = ensure(&mut grads, pred, pv.len());
                        for i in 0..pv.len() {
                            if mask[i] {
                                dp[i] += scale * (pv[i] - targets[i]);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, class } => {
                    let (logits, class) = (*logits, *class);
                    let z: Vec<f64> = self.vals(logits).to_vec();
                    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
                    let dz = ensure(&mut grads, logits, z.len());
                    for (j, &v) in z.iter().enumerate() {
                        let p = (v - max).exp() / sum;
                        dz[j] += grad[0] * (p - if j == class { 1.0 } else { 0.0 });
                    }
                }
                Op::AddScaled { a, b, factor } => {
                    let (a, b, factor) = (*a, *b, *factor);
                    ensure(&mut grads, a, 1)[0] += grad[0];
                    ensure(&mut grads, b, 1)[0] += factor * grad[0];
                }
            }
            // Keep the per-node gradient available for inspection.
            self.nodes[id].value.grad = Some(grad);
        }
    }

    /// Gradient of a node recorded by the last [`backward`](Self::backward)
    /// sweep, if the node participated.
    pub fn grad_of(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].value.grad.as_deref()
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    const LN_EPS: f64 = 1e-5;
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// a (m, k) @ b^T where b is (n, k).
fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// a^T @ b where a is (k, m) and b is (k, n).
fn matmul_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aik = arow[i];
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(tensors: Vec<(&str, Tensor)>) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in tensors {
            store.add(name, t);
        }
        store
    }

    #[test]
    fn matmul_forward_matches_hand_result() {
        let store = store_with(vec![]);
        let mut tape = Tape::new(&store);
        let a = tape.input(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tape.input(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn backward_through_matmul_matches_finite_differences() {
        let w = Tensor::from_values(&[3, 2], vec![0.4, -0.2, 0.1, 0.9, -0.5, 0.3]);
        let mut store = store_with(vec![("w", w)]);
        let x = vec![0.7, -1.2, 0.25];
        let target = 0.6;

        let loss = |store: &ParamStore| {
            let mut tape = Tape::new(store);
            let xi = tape.input(1, 3, x.clone());
            let wp = tape.param(0);
            let h = tape.matmul(xi, wp);
            let g = tape.gelu(h);
            let one = tape.input(2, 1, vec![1.0, 1.0]);
            let s = tape.matmul(g, one);
            tape.squared_error(s, target)
        };

        let mut tape = Tape::new(&store);
        let xi = tape.input(1, 3, x.clone());
        let wp = tape.param(0);
        let h = tape.matmul(xi, wp);
        let g = tape.gelu(h);
        let one = tape.input(2, 1, vec![1.0, 1.0]);
        let s = tape.matmul(g, one);
        let l = tape.squared_error(s, target);
        let mut grads = store.zero_grads();
        tape.backward(l, &mut grads);
        drop(tape);

        let eps = 1e-6;
        for i in 0..6 {
            let orig = store.tensors[0].values[i];
            store.tensors[0].values[i] = orig + eps;
            let plus = {
                let t = &mut Tape::new(&store);
                let l = loss_build(t, &x, target);
                t.value(l)[0]
            };
            store.tensors[0].values[i] = orig - eps;
            let minus = {
                let t = &mut Tape::new(&store);
                let l = loss_build(t, &x, target);
                t.value(l)[0]
            };
            store.tensors[0].values[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            assert!(
                (grads[0][i] - numeric).abs() < 1e-7,
                "param {i}: analytic {} vs numeric {numeric}",
                grads[0][i]
            );
        }
        let _ = loss;

        fn loss_build(tape: &mut Tape, x: &[f64], target: f64) -> NodeId {
            let xi = tape.input(1, 3, x.to_vec());
            let wp = tape.param(0);
            let h = tape.matmul(xi, wp);
            let g = tape.gelu(h);
            let one = tape.input(2, 1, vec![1.0, 1.0]);
            let s = tape.matmul(g, one);
            tape.squared_error(s, target)
        }
    }

    #[test]
    fn softmax_rows_are_probability_vectors() {
        let store = store_with(vec![]);
        let mut tape = Tape::new(&store);
        let x = tape.input(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let y = tape.softmax_rows(x);
        for row in tape.value(y).chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn mask_fill_zeroes_attention_weight() {
        let store = store_with(vec![]);
        let mut tape = Tape::new(&store);
        let x = tape.input(1, 3, vec![0.5, 0.1, 0.9]);
        let masked = tape.mask_fill(x, Rc::new(vec![true, false, true]));
        let probs = tape.softmax_rows(masked);
        assert!(tape.value(probs)[1] < 1e-12);
    }

    #[test]
    fn masked_mse_with_empty_mask_is_zero() {
        let store = store_with(vec![]);
        let mut tape = Tape::new(&store);
        let p = tape.input(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let l = tape.masked_mse(
            p,
            Rc::new(vec![0.0; 4]),
            Rc::new(vec![false; 4]),
        );
        assert_eq!(tape.value(l)[0], 0.0);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let store = store_with(vec![
            ("g", Tensor::from_values(&[1, 4], vec![1.0; 4])),
            ("b", Tensor::from_values(&[1, 4], vec![0.0; 4])),
        ]);
        let mut tape = Tape::new(&store);
        let x = tape.input(1, 4, vec![2.0, 4.0, 6.0, 8.0]);
        let g = tape.param(0);
        let b = tape.param(1);
        let y = tape.layer_norm(x, g, b);
        let row = tape.value(y);
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
