//! A small reverse-mode automatic differentiation engine over `f64` matrices.
//!
//! A [`Tape`] records operations in execution order; since every node only
//! references earlier nodes, reverse insertion order is a valid reverse
//! topological order and [`Tape::backward`] visits each node exactly once.
//! Parameters live in a [`ParamStore`] shared read-only by any number of
//! tapes, which lets independent examples be differentiated concurrently and
//! their [`Gradients`] summed afterwards.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::attention::{attend_lists, ListAttention};
use crate::error::{invalid, Error, Result};
use crate::topology::KeyLists;

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return invalid(format!("duplicate parameter '{name}'"));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value });
        Ok(id)
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.get(name).map(|id| self.value(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradient accumulators; `None` means no gradient reached it.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    /// Sums in slice order, so the result does not depend on how the parts were produced.
    pub fn sum(parts: &[Gradients], n_params: usize) -> Gradients {
        let mut total = Gradients::empty(n_params);
        for p in parts {
            total.add_assign(p);
        }
        total
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Gelu(NodeId),
    Transpose(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention(Box<AttentionRecord>),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    L2NormRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Tensor,
    },
}

struct AttentionRecord {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    table: Option<NodeId>,
    keys: Arc<KeyLists>,
    bias_idx: Option<Arc<Vec<Option<usize>>>>,
    n_heads: usize,
    scale: f64,
    probs: Vec<f64>,
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Gelu(a)
            | Op::Transpose(a)
            | Op::GatherRows(a, _)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention(r) => {
                let mut p = vec![r.q, r.k, r.v];
                p.extend(r.table);
                p
            }
            Op::ConcatRows(parts) => parts.clone(),
            Op::L2NormRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise layer normalization without affine terms; returns `(xhat, 1/std)`.
pub fn normalize_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in xhat.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * r);
        inv.push(r);
    }
    (xhat, inv)
}

/// Records operations for one differentiable computation.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    /// A tape over constants only.
    pub fn detached() -> Tape<'static> {
        Tape {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(p), _) => self.store.expect("param node on detached tape").value(*p),
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[[0, 0]]
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        assert!(self.store.is_some(), "param node on detached tape");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<NodeId> {
        let store = self
            .store
            .ok_or_else(|| Error::Invariant("detached tape has no parameters".into()))?;
        Ok(self.param(store.id(name)?))
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dim()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return invalid(format!("matmul {sa:?} x {sb:?}"));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return invalid(format!("matmul_t {sa:?} x {sb:?}ᵀ"));
        }
        let v = self.value(a).dot(&self.value(b).t());
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return invalid(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return invalid(format!("add_row {sa:?} + {sr:?}"));
        }
        let v = self.value(a) + self.value(row);
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return invalid(format!("mul {:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Multiplies every entry of `a` by the `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return invalid("mul_scalar needs a 1x1 factor");
        }
        let v = self.value(a) * self.scalar(s);
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.shape(x).1;
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return invalid("layer_norm affine terms must be 1 x d");
        }
        let (xhat, inv_std) = normalize_rows(self.value(x));
        let v = &xhat * self.value(gain) + self.value(bias);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head attention restricted to `keys`, with an optional learned
    /// bias table (`n_heads × len`) indexed per permitted pair by `bias_idx`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        keys: Arc<KeyLists>,
        bias: Option<(NodeId, Arc<Vec<Option<usize>>>)>,
    ) -> Result<NodeId> {
        let width = self.shape(q).1;
        if n_heads == 0 || !width.is_multiple_of(n_heads) {
            return invalid(format!("width {width} not divisible by {n_heads} heads"));
        }
        let scale = 1.0 / ((width / n_heads) as f64).sqrt();
        if let Some((t, idx)) = &bias {
            if idx.len() != keys.nnz() || self.shape(*t).0 != n_heads {
                return invalid("bias table or index does not match the key lists");
            }
        }
        let ListAttention { out, probs } = attend_lists(
            self.value(q).view(),
            self.value(k).view(),
            self.value(v).view(),
            n_heads,
            scale,
            &keys,
            bias.as_ref()
                .map(|(t, idx)| (self.value(*t).view(), idx.as_slice())),
        )?;
        let (table, bias_idx) = match bias {
            Some((t, idx)) => (Some(t), Some(idx)),
            None => (None, None),
        };
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                table,
                keys,
                bias_idx,
                n_heads,
                scale,
                probs,
            })),
        ))
    }

    /// Attention weights recorded by an attention node, with its key lists.
    pub fn attention_probs(&self, id: NodeId) -> Option<(&[f64], &KeyLists, usize)> {
        match &self.nodes[id.0].op {
            Op::Attention(r) => Some((&r.probs, &r.keys, r.n_heads)),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let src = self.value(a);
        if let Some(&r) = rows.iter().find(|&&r| r >= src.nrows()) {
            return invalid(format!("gather row {r} of {}", src.nrows()));
        }
        let v = src.select(Axis(0), &rows);
        Ok(self.push(v, Op::GatherRows(a, rows)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidArgument(format!("concat_rows: {e}")))?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let norms: Vec<f64> = src
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect();
        let mut v = src.clone();
        for (mut row, n) in v.axis_iter_mut(Axis(0)).zip(&norms) {
            row /= *n;
        }
        self.push(v, Op::L2NormRows { x, norms })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// `Σ_r −log softmax(logits_r)[targets_r]`
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let l = self.value(logits);
        if targets.len() != l.nrows() || targets.iter().any(|&t| t >= l.ncols()) {
            return invalid("cross_entropy targets do not match logits");
        }
        let mut probs = l.clone();
        crate::attention::softmax_rows_in_place(&mut probs);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// `Σ −[t log σ(x) + (1−t) log(1−σ(x))]`, evaluated stably from logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId> {
        let l = self.value(logits);
        if l.dim() != targets.dim() {
            return invalid("bce targets do not match logits");
        }
        let loss: f64 = Zip::from(l)
            .and(&targets)
            .fold(0.0, |acc, &x, &t| acc + softplus(x) - t * x);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::BceWithLogits { logits, targets },
        ))
    }

    /// `x · W + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return invalid("backward needs a scalar loss");
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::Numerical(format!(
                "loss is {}",
                self.scalar(loss)
            )));
        }
        self.backward_seeded(vec![(loss, Array2::ones((1, 1)))])
    }

    /// Reverse pass seeded with explicit upstream gradients for several nodes.
    pub fn backward_seeded(&self, seeds: Vec<(NodeId, Tensor)>) -> Result<Gradients> {
        Ok(self.backward_capture(seeds, &[])?.0)
    }

    /// Like [`Tape::backward_seeded`], additionally returning the gradient
    /// reaching each node in `capture` (zeros if none does).
    pub fn backward_capture(
        &self,
        seeds: Vec<(NodeId, Tensor)>,
        capture: &[NodeId],
    ) -> Result<(Gradients, Vec<Tensor>)> {
        let mut captured: Vec<Tensor> = capture
            .iter()
            .map(|&c| Array2::zeros(self.shape(c)))
            .collect();
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut visited = vec![false; n];
        let mut start = 0;
        for (id, g) in seeds {
            if g.dim() != self.shape(id) {
                return invalid("seed gradient shape mismatch");
            }
            add_into(&mut grads[id.0], g);
            start = start.max(id.0 + 1);
        }
        let n_params = self.store.map_or(0, ParamStore::len);
        let mut out = Gradients::empty(n_params);
        for i in (0..start).rev() {
            let Some(g) = grads[i].take() else { continue };
            if visited[i] {
                return Err(Error::Invariant(format!("node {i} visited twice")));
            }
            visited[i] = true;
            let node = &self.nodes[i];
            for p in node.op.parents() {
                if p.0 >= i {
                    return Err(Error::Invariant(format!(
                        "node {i} depends on later node {}",
                        p.0
                    )));
                }
            }
            for (slot, c) in captured.iter_mut().zip(capture) {
                if c.0 == i {
                    *slot += &g;
                }
            }
            self.propagate(i, &g, &mut grads, &mut out)?;
        }
        Ok((out, captured))
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(p) => out.accumulate(*p, g),
            Op::MatMul(a, b) => {
                add_into(&mut grads[a.0], g.dot(&self.value(*b).t()));
                add_into(&mut grads[b.0], self.value(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                add_into(&mut grads[a.0], g.dot(self.value(*b)));
                add_into(&mut grads[b.0], g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g.clone());
            }
            Op::AddRow(a, row) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                add_into(&mut grads[a.0], g * self.value(*b));
                add_into(&mut grads[b.0], g * self.value(*a));
            }
            Op::MulScalar(a, sc) => {
                add_into(&mut grads[a.0], g * self.scalar(*sc));
                let ds = (g * self.value(*a)).sum();
                add_into(&mut grads[sc.0], Array2::from_elem((1, 1), ds));
            }
            Op::Scale(a, c) => add_into(&mut grads[a.0], g * *c),
            Op::Exp(a) => add_into(&mut grads[a.0], g * self.value(NodeId(i))),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                add_into(&mut grads[a.0], d);
            }
            Op::Transpose(a) => add_into(&mut grads[a.0], g.t().to_owned()),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                add_into(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                add_into(
                    &mut grads[gain.0],
                    (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                let dxhat = g * self.value(*gain);
                let d = dxhat.ncols() as f64;
                let mut dx = Array2::zeros(dxhat.dim());
                for r in 0..dxhat.nrows() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let s1 = dh.sum();
                    let s2 = dh.dot(&xh);
                    let k = inv_std[r] / d;
                    Zip::from(dx.row_mut(r))
                        .and(&dh)
                        .and(&xh)
                        .for_each(|o, &a, &b| *o = k * (d * a - s1 - b * s2));
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Attention(r) => self.attention_backward(r, g, grads),
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (src, &dst) in rows.iter().enumerate() {
                    let mut row = d.row_mut(dst);
                    row += &g.row(src);
                }
                add_into(&mut grads[a.0], d);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.shape(*p).0;
                    add_into(&mut grads[p.0], g.slice(s![at..at + n, ..]).to_owned());
                    at += n;
                }
            }
            Op::L2NormRows { x, norms } => {
                let y = self.value(NodeId(i));
                let mut d = g.clone();
                for r in 0..d.nrows() {
                    let proj = y.row(r).dot(&g.row(r));
                    let mut row = d.row_mut(r);
                    row.scaled_add(-proj, &y.row(r));
                    row /= norms[r];
                }
                add_into(&mut grads[x.0], d);
            }
            Op::Sum(a) => add_into(&mut grads[a.0], Array2::from_elem(self.shape(*a), g[[0, 0]])),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[[r, t]] -= 1.0;
                }
                d *= g[[0, 0]];
                add_into(&mut grads[logits.0], d);
            }
            Op::BceWithLogits { logits, targets } => {
                let mut d = self.value(*logits).mapv(sigmoid);
                d -= targets;
                d *= g[[0, 0]];
                add_into(&mut grads[logits.0], d);
            }
        }
        Ok(())
    }

    fn attention_backward(&self, r: &AttentionRecord, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (q, k, v) = (self.value(r.q), self.value(r.k), self.value(r.v));
        let hd = q.ncols() / r.n_heads;
        let nnz = r.keys.nnz();
        let mut dq = Array2::zeros(q.dim());
        let mut dk = Array2::zeros(k.dim());
        let mut dv = Array2::zeros(v.dim());
        let mut dtable = r.table.map(|t| Array2::<f64>::zeros(self.shape(t)));
        let mut dp = Vec::new();
        for i in 0..q.nrows() {
            let row = r.keys.row(i);
            let off = r.keys.row_offset(i);
            for h in 0..r.n_heads {
                let cols = h * hd..(h + 1) * hd;
                let gi = g.slice(s![i, cols.clone()]);
                let p = &r.probs[h * nnz + off..h * nnz + off + row.len()];
                dp.clear();
                let mut weighted = 0.0;
                for (&pj, &j) in p.iter().zip(row) {
                    let d = gi.dot(&v.slice(s![j, cols.clone()]));
                    weighted += pj * d;
                    dp.push(d);
                    dv.slice_mut(s![j, cols.clone()]).scaled_add(pj, &gi);
                }
                for (pos, (&pj, &j)) in p.iter().zip(row).enumerate() {
                    let ds = pj * (dp[pos] - weighted);
                    if ds == 0.0 {
                        continue;
                    }
                    if let (Some(dt), Some(idx)) = (dtable.as_mut(), r.bias_idx.as_ref()) {
                        if let Some(c) = idx[off + pos] {
                            dt[[h, c]] += ds;
                        }
                    }
                    let c = ds * r.scale;
                    dq.slice_mut(s![i, cols.clone()])
                        .scaled_add(c, &k.slice(s![j, cols.clone()]));
                    dk.slice_mut(s![j, cols.clone()])
                        .scaled_add(c, &q.slice(s![i, cols.clone()]));
                }
            }
        }
        add_into(&mut grads[r.q.0], dq);
        add_into(&mut grads[r.k.0], dk);
        add_into(&mut grads[r.v.0], dv);
        if let (Some(t), Some(dt)) = (r.table, dtable) {
            add_into(&mut grads[t.0], dt);
        }
    }
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Parameters exempt from weight decay (biases, norms, embeddings, temperature).
    pub no_decay: Vec<bool>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        AdamW {
            config,
            step: 0,
            m: store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect(),
            v: store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect(),
            no_decay: vec![false; store.len()],
        }
    }

    /// One update. Rejects the whole step, leaving parameters untouched, if
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return invalid(format!("learning rate must be finite and >= 0, got {lr}"));
        }
        if !grads.all_finite() {
            return Err(Error::Numerical("non-finite gradient; step rejected".into()));
        }
        if self.m.len() != store.len() || grads.len() != store.len() {
            return Err(Error::Invariant("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..store.len() {
            let id = ParamId(i);
            let decay = if self.no_decay[i] { 0.0 } else { c.weight_decay };
            let p = store.value_mut(id);
            if decay != 0.0 {
                *p *= 1.0 - lr * decay;
            }
            let Some(g) = grads.get(id) else { continue };
            Zip::from(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                });
            Zip::from(p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
                });
        }
        Ok(())
    }
}

/// Central finite difference of a scalar function with respect to one
/// parameter entry.
pub fn finite_difference<F>(
    store: &mut ParamStore,
    id: ParamId,
    index: (usize, usize),
    h: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let orig = store.value(id)[index];
    store.value_mut(id)[index] = orig + h;
    let up = f(store)?;
    store.value_mut(id)[index] = orig - h;
    let down = f(store)?;
    store.value_mut(id)[index] = orig;
    Ok((up - down) / (2.0 * h))
}
