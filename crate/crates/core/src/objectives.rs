//! Pretraining objectives: symmetric contrastive (VTC), matching (VTM) and
//! masked language modelling (MLM), combined with equal weight.
//!
//! Losses are sums over the batch; callers that want per-example numbers
//! divide by the batch size themselves.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::softmax;
use crate::encoder::{MASK_ID, PAD_ID};
use crate::error::{invalid, Result};
use crate::gradengine::{NodeId, Tape};

pub const MASK_PROB: f64 = 0.15;
pub const TAU_MIN: f64 = 0.001;
pub const TAU_MAX: f64 = 0.5;

/// Video and text class features for one batch, rows paired by index.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub z_v: Array2<f64>,
    pub z_t: Array2<f64>,
    pub tau: f64,
}

/// `Σ_i −log softmax(s_i / τ)[i]` over rows of a square similarity matrix.
fn infonce_rows(sim: &Array2<f64>, tau: f64) -> f64 {
    sim.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let logits: Vec<f64> = row.iter().map(|s| s / tau).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            lse - logits[i]
        })
        .sum()
}

/// Symmetric InfoNCE from a precomputed `B × B` similarity matrix
/// (rows: videos, columns: texts).
pub fn vtc_from_similarity(sim: &Array2<f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    if sim.nrows() == 0 || sim.nrows() != sim.ncols() {
        return invalid(format!("similarity matrix must be square and non-empty, got {:?}", sim.dim()));
    }
    Ok(infonce_rows(sim, tau) + infonce_rows(&sim.t().to_owned(), tau))
}

pub fn vtc_loss(batch: &BatchEmbeddings) -> Result<f64> {
    let BatchEmbeddings { z_v, z_t, tau } = batch;
    if z_v.dim() != z_t.dim() {
        return invalid(format!("Z_v is {:?} but Z_t is {:?}", z_v.dim(), z_t.dim()));
    }
    for z in [z_v, z_t] {
        if z.rows().into_iter().any(|r| (r.dot(&r) - 1.0).abs() > 1e-6) {
            return invalid("embedding rows must be unit norm");
        }
    }
    vtc_from_similarity(&z_v.dot(&z_t.t()), *tau)
}

/// Binary cross-entropy over matched pairs (label 1) and negatives (label 0).
pub fn vtm_loss(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if let Some(p) = pos_scores
        .iter()
        .chain(neg_scores)
        .find(|p| !(**p > 0.0 && **p < 1.0))
    {
        return invalid(format!("matching score {p} outside (0, 1)"));
    }
    Ok(pos_scores.iter().map(|p| -p.ln()).sum::<f64>() + neg_scores.iter().map(|p| -(-p).ln_1p()).sum::<f64>())
}

/// Which text positions were masked, per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Indices into each example's token ids (the class token is not part of the ids).
    pub positions: Vec<Vec<usize>>,
    /// Original ids at those positions.
    pub targets: Vec<Vec<usize>>,
    pub mask_prob: f64,
}

impl MaskPlan {
    /// Masks each non-padding token independently with probability `mask_prob`.
    pub fn sample<R: Rng + ?Sized>(ids: &[Vec<usize>], mask_prob: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&mask_prob) {
            return invalid(format!("mask probability {mask_prob} outside [0, 1]"));
        }
        let mut positions = Vec::with_capacity(ids.len());
        let mut targets = Vec::with_capacity(ids.len());
        for seq in ids {
            let mut pos = Vec::new();
            let mut tgt = Vec::new();
            for (i, &id) in seq.iter().enumerate() {
                if id != PAD_ID && rng.gen::<f64>() < mask_prob {
                    pos.push(i);
                    tgt.push(id);
                }
            }
            positions.push(pos);
            targets.push(tgt);
        }
        Ok(MaskPlan {
            positions,
            targets,
            mask_prob,
        })
    }

    /// Ids with masked positions replaced by the mask token.
    pub fn apply(&self, example: usize, ids: &[usize]) -> Vec<usize> {
        let mut out = ids.to_vec();
        for &p in &self.positions[example] {
            out[p] = MASK_ID;
        }
        out
    }

    pub fn n_masked(&self) -> usize {
        self.positions.iter().map(Vec::len).sum()
    }
}

/// Cross-entropy summed over every masked slot. `logits[e]` holds one row
/// per masked position of example `e`, in plan order.
pub fn mlm_loss(logits: &[Array2<f64>], plan: &MaskPlan) -> Result<f64> {
    if logits.len() != plan.targets.len() {
        return invalid(format!("{} logit blocks for {} examples", logits.len(), plan.targets.len()));
    }
    let mut total = 0.0;
    for (l, targets) in logits.iter().zip(&plan.targets) {
        if l.nrows() != targets.len() {
            return invalid("logit rows do not match masked positions");
        }
        for (row, &t) in l.rows().into_iter().zip(targets) {
            if t >= row.len() {
                return invalid(format!("target {t} outside vocabulary of {}", row.len()));
            }
            let p = softmax(&row.to_vec());
            total -= p[t].ln();
        }
    }
    Ok(total)
}

pub fn total_loss(vtc: f64, vtm: f64, mlm: f64) -> f64 {
    vtc + vtm + mlm
}

/// Symmetric InfoNCE on a tape. `z_v`, `z_t` are `B × d`, `log_tau` is `1 × 1`.
pub fn vtc_on_tape(tape: &mut Tape<'_>, z_v: NodeId, z_t: NodeId, log_tau: NodeId) -> Result<NodeId> {
    let b = tape.value(z_v).nrows();
    let sim = tape.matmul_t(z_v, z_t)?;
    let neg = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg);
    let logits = tape.mul_scalar(sim, inv_tau)?;
    let v2t = tape.cross_entropy(logits, (0..b).collect())?;
    let logits_t = tape.transpose(logits);
    let t2v = tape.cross_entropy(logits_t, (0..b).collect())?;
    tape.add(v2t, t2v)
}

/// Keeps `log τ` inside the allowed temperature range.
pub fn clamp_log_tau(log_tau: f64) -> f64 {
    log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln())
}
