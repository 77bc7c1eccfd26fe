//! Node sparsification: keep the `⌈qN⌉` regional tokens with the largest
//! attention from a class-token query and drop the rest.

use std::io::Write;

use ndarray::ArrayView1;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::attention::softmax;
use crate::encoder::TokenSequence;
use crate::error::{invalid, Result};
use crate::topology::GridDims;

/// Which regional tokens survived a pruning site, as indices into the
/// pre-prune regional sequence (ascending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepDecision {
    pub kept_indices: Vec<usize>,
    pub keep_rate: f64,
    pub scores: Vec<f64>,
}

/// `⌈q·n⌉`, treating products within 1e-9 of an integer as exact so decimal
/// keep rates such as 0.1 and 0.7 do not round up spuriously.
pub fn keep_count(n: usize, q: f64) -> Result<usize> {
    if !(q > 0.0 && q <= 1.0) {
        return invalid(format!("keep rate must be in (0, 1], got {q}"));
    }
    let x = q * n as f64;
    let r = x.round();
    Ok(if (x - r).abs() < 1e-9 { r as usize } else { x.ceil() as usize })
}

/// Indices of the `k` largest scores, ties broken by lower index, returned ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

pub fn select_keep(scores: &[f64], q: f64) -> Result<KeepDecision> {
    let k = keep_count(scores.len(), q)?;
    Ok(KeepDecision {
        kept_indices: top_k(scores, k),
        keep_rate: q,
        scores: scores.to_vec(),
    })
}

fn prune(tokens: &TokenSequence, scores: &[f64], q: f64) -> Result<(TokenSequence, KeepDecision)> {
    if scores.len() != tokens.n_regional() {
        return invalid(format!(
            "{} scores for {} regional tokens",
            scores.len(),
            tokens.n_regional()
        ));
    }
    let decision = select_keep(scores, q)?;
    Ok((tokens.select(&decision.kept_indices), decision))
}

/// Keeps the class token and the top `⌈qN⌉` regional tokens by class attention.
pub fn prune_visual(
    tokens: &TokenSequence,
    cls_scores: &[f64],
    q: f64,
) -> Result<(TokenSequence, KeepDecision)> {
    prune(tokens, cls_scores, q)
}

/// Cross-modal variant: scores come from the text class token's attention
/// over the visual key/value sequence.
pub fn prune_multimodal(
    visual_tokens: &TokenSequence,
    scores: &[f64],
    q_m: f64,
) -> Result<(TokenSequence, KeepDecision)> {
    prune(visual_tokens, scores, q_m)
}

/// Softmax of `<q_cls^(t), k_i>` over the visual keys.
pub fn cross_modal_scores(text_cls_query: ArrayView1<f64>, visual_keys: ArrayView2<f64>) -> Result<Vec<f64>> {
    if text_cls_query.len() != visual_keys.ncols() {
        return invalid(format!(
            "query width {} does not match key width {}",
            text_cls_query.len(),
            visual_keys.ncols()
        ));
    }
    let logits: Vec<f64> = visual_keys
        .rows()
        .into_iter()
        .map(|k| text_cls_query.dot(&k))
        .collect();
    Ok(softmax(&logits))
}

/// Pruning sites and keep rates. Layer indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub visual_layers: Vec<usize>,
    pub visual_keep_rates: Vec<f64>,
    pub multimodal_layers: Vec<usize>,
    pub multimodal_keep_rates: Vec<f64>,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self::none()
    }
}

impl PruneSchedule {
    pub fn none() -> Self {
        PruneSchedule {
            visual_layers: Vec::new(),
            visual_keep_rates: Vec::new(),
            multimodal_layers: Vec::new(),
            multimodal_keep_rates: Vec::new(),
        }
    }

    /// Same visual rate at every listed layer; `q_m` once after multimodal layer 1.
    /// Rates of exactly 1 are dropped since they keep everything.
    pub fn uniform(visual_layers: &[usize], q_v: f64, q_m: f64) -> Self {
        let mut s = PruneSchedule::none();
        if q_v < 1.0 {
            s.visual_layers = visual_layers.to_vec();
            s.visual_keep_rates = vec![q_v; visual_layers.len()];
        }
        if q_m < 1.0 {
            s.multimodal_layers = vec![1];
            s.multimodal_keep_rates = vec![q_m];
        }
        s
    }

    pub fn visual_rate(&self, layer: usize) -> Option<f64> {
        self.visual_layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.visual_keep_rates[i])
    }

    pub fn multimodal_rate(&self, layer: usize) -> Option<f64> {
        self.multimodal_layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.multimodal_keep_rates[i])
    }

    pub fn validate(&self, visual_depth: usize, multimodal_depth: usize) -> Result<()> {
        check_sites("visual", &self.visual_layers, &self.visual_keep_rates, visual_depth)?;
        check_sites(
            "multimodal",
            &self.multimodal_layers,
            &self.multimodal_keep_rates,
            multimodal_depth,
        )
    }
}

fn check_sites(what: &str, layers: &[usize], rates: &[f64], depth: usize) -> Result<()> {
    if layers.len() != rates.len() {
        return invalid(format!("{what}: {} layers but {} rates", layers.len(), rates.len()));
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return invalid(format!("{what} prune layers must be strictly increasing"));
    }
    if layers.iter().any(|&l| l == 0 || l > depth) {
        return invalid(format!("{what} prune layer outside 1..={depth}"));
    }
    if let Some(q) = rates.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
        return invalid(format!("{what} keep rate {q} outside (0, 1]"));
    }
    Ok(())
}

/// One exported keep mask: which original grid tokens are alive after `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeepMask {
    pub layer: usize,
    pub grid: GridDims,
    pub alive: Vec<bool>,
}

/// Writes masks as CSV rows `layer,frame,row,col,kept`.
pub fn write_keep_masks<W: Write>(mut out: W, masks: &[KeepMask]) -> Result<()> {
    writeln!(out, "layer,frame,row,col,kept")?;
    for m in masks {
        for (i, &alive) in m.alive.iter().enumerate() {
            let p = m.grid.coords(i);
            writeln!(out, "{},{},{},{},{}", m.layer, p.t, p.h, p.w, u8::from(alive))?;
        }
    }
    Ok(())
}
