//! Dense and edge-sparse multi-head scaled dot-product attention.
//!
//! Queries, keys and values are `n × d` matrices whose columns are split into
//! `n_heads` contiguous groups of `d / n_heads`. The sparse path evaluates
//! only the `(query, key)` pairs listed in a [`KeyLists`], so softmax
//! denominators run over permitted keys only.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{invalid, Error, Result};
use crate::topology::{EdgeSet, GridDims, GridPos, KeyLists};

#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub n_heads: usize,
    pub scale: f64,
}

impl AttentionInputs {
    /// Validates shapes and sets `scale = 1/sqrt(d_h)`.
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>, n_heads: usize) -> Result<Self> {
        check_shapes(q.view(), k.view(), v.view(), n_heads)?;
        let head_dim = q.ncols() / n_heads;
        Ok(AttentionInputs {
            q,
            k,
            v,
            n_heads,
            scale: 1.0 / (head_dim as f64).sqrt(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.q.ncols() / self.n_heads
    }
}

pub(crate) fn check_shapes(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    n_heads: usize,
) -> Result<()> {
    if n_heads == 0 {
        return invalid("n_heads must be >= 1");
    }
    if q.ncols() != k.ncols() || k.ncols() != v.ncols() {
        return invalid(format!(
            "q/k/v widths differ: {} / {} / {}",
            q.ncols(),
            k.ncols(),
            v.ncols()
        ));
    }
    if k.nrows() != v.nrows() {
        return invalid(format!(
            "k has {} rows but v has {}",
            k.nrows(),
            v.nrows()
        ));
    }
    if !q.ncols().is_multiple_of(n_heads) {
        return invalid(format!(
            "width {} is not divisible by {n_heads} heads",
            q.ncols()
        ));
    }
    if k.nrows() == 0 {
        return invalid("attention needs at least one key");
    }
    Ok(())
}

/// Relative position bias: one scalar per head per `(Δt, Δh, Δw)` offset.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosBias {
    pub dims: GridDims,
    /// `n_heads × (2T−1)(2H'−1)(2W'−1)`
    pub table: Array2<f64>,
}

pub fn rel_table_len(dims: GridDims) -> usize {
    (2 * dims.t - 1) * (2 * dims.h - 1) * (2 * dims.w - 1)
}

/// Table column for the offset from query position `q` to key position `k`.
pub fn rel_index(dims: GridDims, q: GridPos, k: GridPos) -> usize {
    let dt = k.t + dims.t - 1 - q.t;
    let dh = k.h + dims.h - 1 - q.h;
    let dw = k.w + dims.w - 1 - q.w;
    (dt * (2 * dims.h - 1) + dh) * (2 * dims.w - 1) + dw
}

impl RelPosBias {
    pub fn zeros(dims: GridDims, n_heads: usize) -> Self {
        RelPosBias {
            dims,
            table: Array2::zeros((n_heads, rel_table_len(dims))),
        }
    }

    pub fn from_table(dims: GridDims, table: Array2<f64>) -> Result<Self> {
        if table.ncols() != rel_table_len(dims) {
            return invalid(format!(
                "bias table has {} columns, grid needs {}",
                table.ncols(),
                rel_table_len(dims)
            ));
        }
        Ok(RelPosBias { dims, table })
    }

    pub fn n_heads(&self) -> usize {
        self.table.nrows()
    }

    pub fn value(&self, head: usize, q: GridPos, k: GridPos) -> f64 {
        self.table[[head, rel_index(self.dims, q, k)]]
    }
}

/// Grid positions of the query and key rows a bias applies to; `None` marks a
/// class token, which receives no positional bias.
#[derive(Debug, Clone, Copy)]
pub struct PairBias<'a> {
    pub bias: &'a RelPosBias,
    pub query_pos: &'a [Option<GridPos>],
    pub key_pos: &'a [Option<GridPos>],
}

impl PairBias<'_> {
    fn index(&self, qi: usize, kj: usize) -> Option<usize> {
        match (self.query_pos[qi], self.key_pos[kj]) {
            (Some(q), Some(k)) => Some(rel_index(self.bias.dims, q, k)),
            _ => None,
        }
    }

    /// Table column for every permitted pair, in key-list order.
    pub fn edge_indices(&self, keys: &KeyLists) -> Vec<Option<usize>> {
        (0..keys.n_queries())
            .flat_map(|i| keys.row(i).iter().map(move |&j| self.index(i, j)))
            .collect()
    }
}

/// Result of the list-based kernel: outputs plus the normalized weights,
/// laid out as `probs[head * nnz + key_list_position]`.
#[derive(Debug, Clone)]
pub struct ListAttention {
    pub out: Array2<f64>,
    pub probs: Vec<f64>,
}

/// Attention restricted to per-query key lists. Shared by the public sparse
/// entry point and the differentiable attention op.
pub(crate) fn attend_lists(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    n_heads: usize,
    scale: f64,
    keys: &KeyLists,
    bias: Option<(ArrayView2<f64>, &[Option<usize>])>,
) -> Result<ListAttention> {
    check_shapes(q, k, v, n_heads)?;
    if keys.n_queries() != q.nrows() || keys.n_keys() != k.nrows() {
        return invalid(format!(
            "key lists are {}x{} but attention is {}x{}",
            keys.n_queries(),
            keys.n_keys(),
            q.nrows(),
            k.nrows()
        ));
    }
    let hd = q.ncols() / n_heads;
    let nnz = keys.nnz();
    let mut out = Array2::zeros((q.nrows(), q.ncols()));
    let mut probs = vec![0.0; n_heads * nnz];
    let mut logits = Vec::new();
    for i in 0..q.nrows() {
        let row = keys.row(i);
        if row.is_empty() {
            return Err(Error::Invariant(format!(
                "query {i} has no permitted keys"
            )));
        }
        let off = keys.row_offset(i);
        for h in 0..n_heads {
            let cols = h * hd..(h + 1) * hd;
            let qi = q.slice(s![i, cols.clone()]);
            logits.clear();
            for (pos, &j) in row.iter().enumerate() {
                let mut l = qi.dot(&k.slice(s![j, cols.clone()])) * scale;
                if let Some((table, idx)) = bias {
                    if let Some(c) = idx[off + pos] {
                        l += table[[h, c]];
                    }
                }
                logits.push(l);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                denom += *l;
            }
            let p = &mut probs[h * nnz + off..h * nnz + off + row.len()];
            for (dst, e) in p.iter_mut().zip(&logits) {
                *dst = e / denom;
            }
            let mut o = out.slice_mut(s![i, cols.clone()]);
            for (&w, &j) in p.iter().zip(row) {
                o.scaled_add(w, &v.slice(s![j, cols.clone()]));
            }
        }
    }
    Ok(ListAttention { out, probs })
}

/// Softmax over every key for every query (plus optional bias), applied to V.
pub fn dense_attention(inputs: &AttentionInputs, bias: Option<PairBias<'_>>) -> Result<Array2<f64>> {
    let AttentionInputs { q, k, v, n_heads, scale } = inputs;
    check_shapes(q.view(), k.view(), v.view(), *n_heads)?;
    let hd = inputs.head_dim();
    let mut out = Array2::zeros((q.nrows(), q.ncols()));
    for h in 0..*n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * *scale;
        if let Some(b) = bias {
            for ((i, j), x) in scores.indexed_iter_mut() {
                if let Some(c) = b.index(i, j) {
                    *x += b.bias.table[[h, c]];
                }
            }
        }
        softmax_rows_in_place(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
    }
    Ok(out)
}

/// Attention restricted to the edges of `edges`; query and key rows are
/// sequence positions with the class token at row 0.
pub fn sparse_attention(
    inputs: &AttentionInputs,
    edges: &EdgeSet,
    bias: Option<PairBias<'_>>,
) -> Result<Array2<f64>> {
    let seq = edges.seq_len();
    if inputs.q.nrows() != seq || inputs.k.nrows() != seq {
        return invalid(format!(
            "edge set covers {seq} tokens but inputs have {} queries and {} keys",
            inputs.q.nrows(),
            inputs.k.nrows()
        ));
    }
    let keys = KeyLists::from_edge_set(edges);
    let idx = bias.map(|b| b.edge_indices(&keys));
    let table = bias.map(|b| b.bias.table.view());
    let res = attend_lists(
        inputs.q.view(),
        inputs.k.view(),
        inputs.v.view(),
        inputs.n_heads,
        inputs.scale,
        &keys,
        table.zip(idx.as_deref()),
    )?;
    Ok(res.out)
}

/// Class-token attention over the regional keys (rows `1..`), normalized
/// over regional keys only and averaged across heads.
pub fn extract_cls_attention(inputs: &AttentionInputs) -> Vec<f64> {
    let hd = inputs.head_dim();
    let n = inputs.k.nrows().saturating_sub(1);
    let mut acc = vec![0.0; n];
    if n == 0 {
        return acc;
    }
    for h in 0..inputs.n_heads {
        let cols = s![h * hd..(h + 1) * hd];
        let q0 = inputs.q.row(0);
        let q0 = q0.slice(cols);
        let logits: Vec<f64> = (1..=n)
            .map(|j| q0.dot(&inputs.k.row(j).slice(cols)) * inputs.scale)
            .collect();
        for (a, p) in acc.iter_mut().zip(softmax(&logits)) {
            *a += p;
        }
    }
    acc.iter().map(|a| a / inputs.n_heads as f64).collect()
}

/// Head-averaged attention of query `row` over keys `1..n_keys`, renormalized
/// to exclude key 0 (the class token). The row must list every key.
pub(crate) fn query_scores(
    probs: &[f64],
    keys: &KeyLists,
    n_heads: usize,
    row: usize,
) -> Result<Vec<f64>> {
    let list = keys.row(row);
    if list.len() != keys.n_keys() {
        return Err(Error::Invariant(format!(
            "scoring query {row} attends {} of {} keys",
            list.len(),
            keys.n_keys()
        )));
    }
    let nnz = keys.nnz();
    let off = keys.row_offset(row);
    let n = keys.n_keys() - 1;
    let mut acc = vec![0.0; n];
    for h in 0..n_heads {
        let p = &probs[h * nnz + off..h * nnz + off + n + 1];
        let rest = 1.0 - p[0];
        let denom: f64 = if rest > 1e-12 { rest } else { p[1..].iter().sum() };
        for (a, &pj) in acc.iter_mut().zip(&p[1..]) {
            *a += pj / denom;
        }
    }
    Ok(acc.iter().map(|a| a / n_heads as f64).collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn softmax_rows_in_place(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
}
