//! Analytic accounting of attention edges, FLOPs and activation memory.
//!
//! Conventions:
//! - token counts include the class token; the regional count after a
//!   pruning site is `⌈q·n⌉`;
//! - a sparse visual layer over `N` tokens has `N·(K_l+K_r)·G` edges, a dense
//!   one `N²`; a multimodal layer has `N_v·N_t` edges (visual keys times text
//!   queries);
//! - dense projections and feed-forward layers cost 2 FLOPs per
//!   multiply-accumulate; attention score plus value aggregation together
//!   cost `d` FLOPs per edge; softmax and layer normalization cost 5 FLOPs
//!   per element;
//! - memory counts activations retained for the backward pass, as `f32`.

use serde::{Deserialize, Serialize};

use crate::encoder::{ModelConfig, SparsityConfig};
use crate::error::{invalid, Result};
use crate::pruning::{keep_count, PruneSchedule};
use crate::seed::derive_seed;
use crate::topology::{chunk_blocks, count_edges, EdgeSet};

/// Model dimensions that drive the accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostDims {
    pub visual_depth: usize,
    pub text_depth: usize,
    pub multimodal_depth: usize,
    pub tokens_per_frame: usize,
    pub text_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub channels: usize,
    /// Visual layers followed by a pruning site (1-based).
    pub prune_layers: Vec<usize>,
}

impl CostDims {
    /// ViT-B/16 video encoder at 224² with a 12-layer text encoder whose
    /// last 3 layers are multimodal.
    pub fn full_size() -> Self {
        CostDims {
            visual_depth: 12,
            text_depth: 12,
            multimodal_depth: 3,
            tokens_per_frame: 196,
            text_len: 32,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            patch: 16,
            channels: 3,
            prune_layers: vec![4, 7, 10],
        }
    }

    pub fn from_model(cfg: &ModelConfig) -> Self {
        let prune_layers = if cfg.prune.visual_layers.is_empty() {
            default_prune_layers(cfg.visual_depth)
        } else {
            cfg.prune.visual_layers.clone()
        };
        CostDims {
            visual_depth: cfg.visual_depth,
            text_depth: cfg.text_depth,
            multimodal_depth: cfg.multimodal_depth,
            tokens_per_frame: cfg.grid().per_frame(),
            text_len: cfg.text_len,
            dim: cfg.dim,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            patch: cfg.patch,
            channels: cfg.channels,
            prune_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual_depth == 0 || self.tokens_per_frame == 0 || self.text_len == 0 || self.dim == 0 || self.heads == 0 {
            return invalid("cost dimensions must be positive");
        }
        if self.multimodal_depth >= self.text_depth {
            return invalid("multimodal depth must be below text depth");
        }
        if self.prune_layers.iter().any(|&l| l == 0 || l > self.visual_depth) {
            return invalid("prune layer outside the visual stack");
        }
        Ok(())
    }
}

/// Pruning sites scaled from layers 4, 7 and 10 of a 12-layer stack
/// (layers 2, 4 and 5 of 6).
pub fn default_prune_layers(depth: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [4usize, 7, 10]
        .iter()
        .map(|l| ((l * depth) as f64 / 12.0).round().max(1.0) as usize)
        .collect();
    v.dedup();
    v
}

/// What to account for: clip length, visual attention pattern and pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub frames: usize,
    pub sparsity: SparsityConfig,
    pub prune: PruneSchedule,
}

impl CostConfig {
    pub fn dense(frames: usize) -> Self {
        CostConfig {
            frames,
            sparsity: SparsityConfig::Dense,
            prune: PruneSchedule::none(),
        }
    }

    /// Uniform `q_v` at the dims' pruning sites, `q_m` after multimodal layer 1.
    pub fn with_rates(frames: usize, sparsity: SparsityConfig, q_v: f64, q_m: f64, dims: &CostDims) -> Self {
        CostConfig {
            frames,
            sparsity,
            prune: PruneSchedule::uniform(&dims.prune_layers, q_v, q_m),
        }
    }
}

/// How sparse visual layers are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// `N·(K_l+K_r)·G` per layer.
    Formula,
    /// The exact directed edges of a realized block graph, padding and
    /// window clipping included.
    Exact { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeProfile {
    /// Tokens (class token included) entering each visual layer.
    pub visual_tokens: Vec<usize>,
    pub visual_edges: Vec<u64>,
    /// Visual keys (class token included) seen by each multimodal layer.
    pub multimodal_keys: Vec<usize>,
    pub multimodal_edges: Vec<u64>,
    pub total: u64,
}

pub fn edge_profile(cfg: &CostConfig, dims: &CostDims, mode: EdgeMode) -> Result<EdgeProfile> {
    dims.validate()?;
    if cfg.frames == 0 {
        return invalid("frames must be >= 1");
    }
    cfg.sparsity.validate()?;
    cfg.prune.validate(dims.visual_depth, dims.multimodal_depth)?;
    let mut n = cfg.frames * dims.tokens_per_frame;
    let mut visual_tokens = Vec::new();
    let mut visual_edges = Vec::new();
    for l in 1..=dims.visual_depth {
        let big_n = n as u64 + 1;
        let e = match (cfg.sparsity, mode) {
            (SparsityConfig::Dense, _) => big_n * big_n,
            (SparsityConfig::Block { k_local, k_random, block_size }, EdgeMode::Formula) => {
                // a window wider than the sequence cannot exceed the complete graph
                (big_n * (k_local + k_random) as u64 * block_size as u64).min(big_n * big_n)
            }
            (SparsityConfig::Block { k_local, k_random, block_size }, EdgeMode::Exact { seed }) => {
                let layout = chunk_blocks(n, block_size)?;
                count_edges(&EdgeSet::seeded(layout, k_local, k_random, true, derive_seed(seed, &[l as u64]))?)
            }
        };
        visual_tokens.push(n + 1);
        visual_edges.push(e);
        if let Some(q) = cfg.prune.visual_rate(l) {
            n = keep_count(n, q)?;
        }
    }
    let mut multimodal_keys = Vec::new();
    let mut multimodal_edges = Vec::new();
    for l in 1..=dims.multimodal_depth {
        multimodal_keys.push(n + 1);
        multimodal_edges.push((n as u64 + 1) * dims.text_len as u64);
        if let Some(q) = cfg.prune.multimodal_rate(l) {
            n = keep_count(n, q)?;
        }
    }
    let total = visual_edges.iter().sum::<u64>() + multimodal_edges.iter().sum::<u64>();
    Ok(EdgeProfile {
        visual_tokens,
        visual_edges,
        multimodal_keys,
        multimodal_edges,
        total,
    })
}

/// Edge count of the fully dense model: `L_v·N_v² + L_m·N_t·N_v`.
pub fn dense_edges(frames: usize, dims: &CostDims) -> u64 {
    let nv = (frames * dims.tokens_per_frame + 1) as u64;
    dims.visual_depth as u64 * nv * nv + dims.multimodal_depth as u64 * dims.text_len as u64 * nv
}

/// `1 − edges/dense_edges`, from exact integers with a single final division.
pub fn sparsity(profile: &EdgeProfile, frames: usize, dims: &CostDims) -> f64 {
    let dense = dense_edges(frames, dims);
    let kept = profile.total.min(dense);
    (dense - kept) as f64 / dense as f64
}

/// FLOPs of one self-attention transformer layer over `n` tokens and `e` edges.
fn layer_flops(n: u64, e: u64, d: u64, heads: u64, mlp: u64) -> u64 {
    let proj = 2 * 4 * d * d * n;
    let ffn = 2 * 2 * mlp * d * d * n;
    let attn = d * e + 5 * heads * e;
    let norms = 2 * 5 * n * d;
    proj + ffn + attn + norms
}

/// FLOPs of the attention kernel alone (score, softmax, aggregation).
pub fn attention_flops(edges: u64, dims: &CostDims) -> u64 {
    dims.dim as u64 * edges + 5 * dims.heads as u64 * edges
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    /// Video encoder, patch projection included.
    pub video: f64,
    pub text: f64,
    pub multimodal: f64,
}

impl FlopsEstimate {
    pub fn total(&self) -> f64 {
        self.video + self.text + self.multimodal
    }
}

/// Inference FLOPs in GFLOPs, split by encoder.
pub fn flops_estimate(cfg: &CostConfig, dims: &CostDims) -> Result<FlopsEstimate> {
    let p = edge_profile(cfg, dims, EdgeMode::Formula)?;
    let (d, h, m) = (dims.dim as u64, dims.heads as u64, dims.mlp_ratio as u64);
    let regional = (cfg.frames * dims.tokens_per_frame) as u64;
    let patch = 2 * (dims.patch * dims.patch * dims.channels) as u64 * d * regional;
    let video: u64 = patch
        + p.visual_tokens
            .iter()
            .zip(&p.visual_edges)
            .map(|(&n, &e)| layer_flops(n as u64, e, d, h, m))
            .sum::<u64>()
        + 2 * d * d;
    let nt = dims.text_len as u64;
    let text_layers = (dims.text_depth - dims.multimodal_depth) as u64;
    let text = text_layers * layer_flops(nt, nt * nt, d, h, m) + 2 * d * d;
    let multimodal: u64 = p
        .multimodal_keys
        .iter()
        .zip(&p.multimodal_edges)
        .map(|(&nv, &e)| {
            let nv = nv as u64;
            // self-attention block on text, then cross-attention: q/o on text, k/v on video
            layer_flops(nt, nt * nt, d, h, m) + 2 * 2 * d * d * (nt + nv) + d * e + 5 * h * e + 5 * nt * d
        })
        .sum();
    let g = |x: u64| x as f64 / 1e9;
    Ok(FlopsEstimate {
        video: g(video),
        text: g(text),
        multimodal: g(multimodal),
    })
}

/// Retained `f32` activation elements for one self-attention layer: stream,
/// two norm outputs, q/k/v, attention output, projection output, the two
/// feed-forward activations, plus per-head logits and weights on every edge.
fn layer_activations(n: u64, e: u64, d: u64, heads: u64, mlp: u64) -> u64 {
    (8 + 2 * mlp) * n * d + 2 * heads * e
}

/// Training activation memory in bytes for `batch` samples.
pub fn memory_estimate(cfg: &CostConfig, dims: &CostDims, batch: usize) -> Result<u64> {
    if batch == 0 {
        return Ok(0);
    }
    let p = edge_profile(cfg, dims, EdgeMode::Formula)?;
    let (d, h, m) = (dims.dim as u64, dims.heads as u64, dims.mlp_ratio as u64);
    let nt = dims.text_len as u64;
    let mut elems: u64 = p
        .visual_tokens
        .iter()
        .zip(&p.visual_edges)
        .map(|(&n, &e)| layer_activations(n as u64, e, d, h, m))
        .sum();
    elems += (dims.text_depth - dims.multimodal_depth) as u64 * layer_activations(nt, nt * nt, d, h, m);
    elems += p
        .multimodal_keys
        .iter()
        .zip(&p.multimodal_edges)
        .map(|(&nv, &e)| layer_activations(nt, nt * nt, d, h, m) + 2 * nv as u64 * d + 4 * nt * d + 2 * h * e)
        .sum::<u64>();
    Ok(elems * 4 * batch as u64)
}

/// Everything the `cost` command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: CostConfig,
    pub dims: CostDims,
    pub edges: EdgeProfile,
    pub total_edges: u64,
    pub dense_edges: u64,
    pub sparsity: f64,
    pub gflops: FlopsEstimate,
    pub memory_bytes_per_sample: u64,
}

pub fn cost_report(cfg: &CostConfig, dims: &CostDims) -> Result<CostReport> {
    let edges = edge_profile(cfg, dims, EdgeMode::Formula)?;
    Ok(CostReport {
        total_edges: edges.total,
        dense_edges: dense_edges(cfg.frames, dims),
        sparsity: sparsity(&edges, cfg.frames, dims),
        gflops: flops_estimate(cfg, dims)?,
        memory_bytes_per_sample: memory_estimate(cfg, dims, 1)?,
        edges,
        config: cfg.clone(),
        dims: dims.clone(),
    })
}

impl CostReport {
    /// Fixed-width human-readable summary.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str("layer  tokens      edges\n");
        for (i, (n, e)) in self.edges.visual_tokens.iter().zip(&self.edges.visual_edges).enumerate() {
            s.push_str(&format!("v{:<4} {:>7} {:>10}\n", i + 1, n, e));
        }
        for (i, (n, e)) in self.edges.multimodal_keys.iter().zip(&self.edges.multimodal_edges).enumerate() {
            s.push_str(&format!("m{:<4} {:>7} {:>10}\n", i + 1, n, e));
        }
        s.push_str(&format!(
            "total edges {:.3}M (dense {:.3}M), sparsity {:.3}\n",
            self.total_edges as f64 / 1e6,
            self.dense_edges as f64 / 1e6,
            self.sparsity
        ));
        s.push_str(&format!(
            "GFLOPs video {:.1}, text {:.1}, multimodal {:.1}\n",
            self.gflops.video, self.gflops.text, self.gflops.multimodal
        ));
        s.push_str(&format!(
            "activation memory {:.2} GB per sample\n",
            self.memory_bytes_per_sample as f64 / 1e9
        ));
        s
    }
}
