//! The model: patch tokenizer, sparse visual encoder, text encoder and the
//! multimodal encoder with text-to-video cross-attention, plus positional
//! embedding inflation and temporal interpolation.
//!
//! Every forward pass is recorded on a [`Tape`], so the same code serves
//! inference and training. The value-level functions at the bottom of the
//! module wrap the tape passes for callers that only need outputs.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{query_scores, rel_index, rel_table_len, RelPosBias};
use crate::error::{invalid, Error, Result};
use crate::gradengine::{NodeId, ParamStore, Tape};
use crate::pruning::{select_keep, KeepDecision, PruneSchedule};
use crate::seed::{derive_seed, rng_for};
use crate::topology::{chunk_blocks, reorder_tokens, EdgeSet, GridDims, GridPos, KeyLists, OrderScheme};

/// Frames × height × width × channels, values in `[0, 1]`.
pub type Clip = Array4<f64>;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const MASK_ID: usize = 2;
/// First id available for words.
pub const FIRST_WORD_ID: usize = 3;

/// Visual attention pattern. `Block` chunks regional tokens into blocks of
/// `block_size`; each block sees `k_local` neighbouring blocks (odd, centred)
/// plus `k_random` random ones, and the class token is global.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SparsityConfig {
    Dense,
    Block {
        k_local: usize,
        k_random: usize,
        block_size: usize,
    },
}

impl SparsityConfig {
    pub fn block(k_local: usize, k_random: usize, block_size: usize) -> Self {
        SparsityConfig::Block {
            k_local,
            k_random,
            block_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SparsityConfig::Block {
            k_local,
            block_size,
            ..
        } = *self
        {
            if k_local == 0 || k_local % 2 == 0 {
                return invalid(format!("k_local must be odd and >= 1, got {k_local}"));
            }
            if block_size == 0 {
                return invalid("block_size must be >= 1");
            }
        }
        Ok(())
    }

    /// The per-layer attention graph over `n` regional tokens.
    pub fn key_lists(&self, n: usize, seed: u64) -> Result<KeyLists> {
        match *self {
            SparsityConfig::Dense => Ok(KeyLists::complete(n + 1, n + 1)),
            SparsityConfig::Block {
                k_local,
                k_random,
                block_size,
            } => {
                let layout = chunk_blocks(n, block_size)?;
                let edges = EdgeSet::seeded(layout, k_local, k_random, true, seed)?;
                Ok(KeyLists::from_edge_set(&edges))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub visual_depth: usize,
    /// Total text depth; the last `multimodal_depth` layers carry cross-attention.
    pub text_depth: usize,
    pub multimodal_depth: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub sparsity: SparsityConfig,
    pub prune: PruneSchedule,
    pub order: OrderScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 4,
            frame_height: 32,
            frame_width: 32,
            channels: 3,
            patch: 8,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            visual_depth: 6,
            text_depth: 4,
            multimodal_depth: 2,
            text_len: 16,
            vocab: 256,
            sparsity: SparsityConfig::Dense,
            prune: PruneSchedule::none(),
            order: OrderScheme::Standard,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> GridDims {
        GridDims::new(
            self.frames,
            self.frame_height / self.patch.max(1),
            self.frame_width / self.patch.max(1),
        )
    }

    pub fn n_regional(&self) -> usize {
        self.grid().volume()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn text_only_depth(&self) -> usize {
        self.text_depth.saturating_sub(self.multimodal_depth)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("visual_depth", self.visual_depth),
            ("text_depth", self.text_depth),
            ("multimodal_depth", self.multimodal_depth),
            ("text_len", self.text_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return invalid(format!("{name} must be >= 1"));
        }
        if !self.frame_height.is_multiple_of(self.patch) || !self.frame_width.is_multiple_of(self.patch) {
            return invalid(format!(
                "frame {}x{} not divisible by patch {}",
                self.frame_height, self.frame_width, self.patch
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return invalid(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.multimodal_depth >= self.text_depth {
            return invalid("multimodal_depth must be smaller than text_depth");
        }
        if self.vocab <= FIRST_WORD_ID {
            return invalid(format!("vocab must exceed {FIRST_WORD_ID}"));
        }
        self.sparsity.validate()?;
        self.prune.validate(self.visual_depth, self.multimodal_depth)
    }

    /// Every parameter name and shape, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let d = self.dim;
        let mut out = vec![
            ("vis.patch.w".to_string(), (self.patch_dim(), d)),
            ("vis.patch.b".to_string(), (1, d)),
            ("vis.cls".to_string(), (1, d)),
            ("vis.pos".to_string(), (self.n_regional() + 1, d)),
        ];
        for l in 1..=self.visual_depth {
            let p = visual_block(l);
            out.extend(self.block_shapes(&p));
            out.push((format!("{p}.rel"), (self.heads, rel_table_len(self.grid()))));
        }
        out.push(("vis.ln.g".into(), (1, d)));
        out.push(("vis.ln.b".into(), (1, d)));
        out.push(("vis.proj.w".into(), (d, d)));
        out.push(("txt.tok".into(), (self.vocab, d)));
        out.push(("txt.pos".into(), (self.text_len + 1, d)));
        for l in 1..=self.text_only_depth() {
            out.extend(self.block_shapes(&text_block(l)));
        }
        out.push(("txt.ln.g".into(), (1, d)));
        out.push(("txt.ln.b".into(), (1, d)));
        out.push(("txt.proj.w".into(), (d, d)));
        for l in 1..=self.multimodal_depth {
            let p = fusion_block(l);
            out.extend(self.block_shapes(&p));
            out.push((format!("{p}.xattn.ln.g"), (1, d)));
            out.push((format!("{p}.xattn.ln.b"), (1, d)));
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{p}.xattn.{proj}.w"), (d, d)));
                out.push((format!("{p}.xattn.{proj}.b"), (1, d)));
            }
        }
        out.push(("mm.ln.g".into(), (1, d)));
        out.push(("mm.ln.b".into(), (1, d)));
        out.push(("vtm.head.w".into(), (d, 1)));
        out.push(("vtm.head.b".into(), (1, 1)));
        out.push(("mlm.head.w".into(), (d, self.vocab)));
        out.push(("mlm.head.b".into(), (1, self.vocab)));
        out.push(("log_tau".into(), (1, 1)));
        out
    }

    fn block_shapes(&self, prefix: &str) -> Vec<(String, (usize, usize))> {
        let d = self.dim;
        let h = d * self.mlp_ratio;
        let mut v = vec![
            (format!("{prefix}.ln1.g"), (1, d)),
            (format!("{prefix}.ln1.b"), (1, d)),
        ];
        for proj in ["q", "k", "v", "o"] {
            v.push((format!("{prefix}.attn.{proj}.w"), (d, d)));
            v.push((format!("{prefix}.attn.{proj}.b"), (1, d)));
        }
        v.extend([
            (format!("{prefix}.ln2.g"), (1, d)),
            (format!("{prefix}.ln2.b"), (1, d)),
            (format!("{prefix}.mlp.fc1.w"), (d, h)),
            (format!("{prefix}.mlp.fc1.b"), (1, h)),
            (format!("{prefix}.mlp.fc2.w"), (h, d)),
            (format!("{prefix}.mlp.fc2.b"), (1, d)),
        ]);
        v
    }
}

pub fn visual_block(layer: usize) -> String {
    format!("vis.blk{layer}")
}

pub fn text_block(layer: usize) -> String {
    format!("txt.blk{layer}")
}

pub fn fusion_block(layer: usize) -> String {
    format!("mm.blk{layer}")
}

pub const INIT_STD: f64 = 0.02;
pub const INIT_TAU: f64 = 0.07;

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Random initialization. Values are rounded to `f32` so a saved and
    /// reloaded model is bit-identical to the one in memory.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x1417]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let value = if name.ends_with(".g") {
                Array2::ones(shape)
            } else if name.ends_with(".b") || name.ends_with(".rel") {
                Array2::zeros(shape)
            } else if name == "log_tau" {
                Array2::from_elem(shape, INIT_TAU.ln())
            } else if name == "vis.pos" {
                let g = config.grid();
                let plane = Array2::from_shape_fn((g.per_frame() + 1, config.dim), |_| {
                    normal.sample(&mut rng)
                });
                inflate_pos_embed(&plane, g.t)?
            } else {
                Array2::from_shape_fn(shape, |_| normal.sample(&mut rng))
            };
            params.insert(name, value.mapv(|x| x as f32 as f64))?;
        }
        Ok(Model { config, params })
    }

    /// Pairs a configuration with loaded parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return invalid(format!(
                "checkpoint has {} tensors, config expects {}",
                params.len(),
                expected.len()
            ));
        }
        for (name, shape) in &expected {
            match params.by_name(name) {
                Some(t) if t.dim() == *shape => {}
                Some(t) => {
                    return invalid(format!(
                        "tensor '{name}' is {:?}, config expects {shape:?}",
                        t.dim()
                    ))
                }
                None => return invalid(format!("checkpoint lacks tensor '{name}'")),
            }
        }
        Ok(Model { config, params })
    }

    /// Weight decay applies to projection matrices only.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.params.iter().map(|(_, p)| p.name.ends_with(".w")).collect()
    }

    pub fn tau(&self) -> f64 {
        self.params.by_name("log_tau").map_or(INIT_TAU, |t| t[[0, 0]].exp())
    }
}

/// Embedded tokens, row 0 the class token. `origin[i]` is the row-major grid
/// index of the regional token in row `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Array2<f64>,
    pub grid: GridDims,
    pub origin: Vec<usize>,
}

impl TokenSequence {
    pub fn new(embeddings: Array2<f64>, grid: GridDims) -> Result<Self> {
        let n = grid.volume();
        Self::with_origin(embeddings, grid, (0..n).collect())
    }

    pub fn with_origin(embeddings: Array2<f64>, grid: GridDims, origin: Vec<usize>) -> Result<Self> {
        if embeddings.nrows() != origin.len() + 1 {
            return invalid(format!(
                "{} rows for {} regional tokens plus cls",
                embeddings.nrows(),
                origin.len()
            ));
        }
        let mut seen = vec![false; grid.volume()];
        for &o in &origin {
            if o >= seen.len() || std::mem::replace(&mut seen[o], true) {
                return invalid(format!("origin index {o} out of range or repeated"));
            }
        }
        Ok(TokenSequence {
            embeddings,
            grid,
            origin,
        })
    }

    pub fn n_regional(&self) -> usize {
        self.origin.len()
    }

    /// Keeps the class token and the given regional tokens (indices into the
    /// current regional rows, ascending).
    pub fn select(&self, kept: &[usize]) -> TokenSequence {
        let rows: Vec<usize> = std::iter::once(0).chain(kept.iter().map(|k| k + 1)).collect();
        TokenSequence {
            embeddings: self.embeddings.select(Axis(0), &rows),
            grid: self.grid,
            origin: kept.iter().map(|&k| self.origin[k]).collect(),
        }
    }

    pub fn coords(&self) -> Vec<GridPos> {
        self.origin.iter().map(|&o| self.grid.coords(o)).collect()
    }

    /// Grid position of every row; `None` for the class token.
    pub fn positions(&self) -> Vec<Option<GridPos>> {
        positions(self.grid, &self.origin)
    }

    /// Which grid cells are still present.
    pub fn alive_mask(&self) -> Vec<bool> {
        alive_mask(self.grid, &self.origin)
    }
}

pub fn positions(grid: GridDims, origin: &[usize]) -> Vec<Option<GridPos>> {
    std::iter::once(None)
        .chain(origin.iter().map(|&o| Some(grid.coords(o))))
        .collect()
}

pub fn alive_mask(grid: GridDims, origin: &[usize]) -> Vec<bool> {
    let mut alive = vec![false; grid.volume()];
    for &o in origin {
        alive[o] = true;
    }
    alive
}

/// Flattens non-overlapping `patch × patch` tiles into rows, ordered by
/// `(t, h, w)`; each row lists pixels row-major with channels innermost.
pub fn patchify(clip: &Clip, patch: usize) -> Result<Array2<f64>> {
    let (t, h, w, c) = clip.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return invalid(format!("frame {h}x{w} not divisible by patch {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((t * gh * gw, patch * patch * c));
    for f in 0..t {
        for i in 0..gh {
            for j in 0..gw {
                let tile = clip.slice(s![f, i * patch..(i + 1) * patch, j * patch..(j + 1) * patch, ..]);
                let row = (f * gh + i) * gw + j;
                for (dst, src) in out.row_mut(row).iter_mut().zip(tile.iter()) {
                    *dst = *src;
                }
            }
        }
    }
    Ok(out)
}

/// Parameter nodes of one transformer block.
pub struct BlockNodes {
    ln1: (NodeId, NodeId),
    q: (NodeId, NodeId),
    k: (NodeId, NodeId),
    v: (NodeId, NodeId),
    o: (NodeId, NodeId),
    ln2: (NodeId, NodeId),
    fc1: (NodeId, NodeId),
    fc2: (NodeId, NodeId),
}

/// Weights of one block as plain matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: (Array2<f64>, Array2<f64>),
    pub q: (Array2<f64>, Array2<f64>),
    pub k: (Array2<f64>, Array2<f64>),
    pub v: (Array2<f64>, Array2<f64>),
    pub o: (Array2<f64>, Array2<f64>),
    pub ln2: (Array2<f64>, Array2<f64>),
    pub fc1: (Array2<f64>, Array2<f64>),
    pub fc2: (Array2<f64>, Array2<f64>),
}

const BLOCK_PARTS: [&str; 8] = ["ln1", "attn.q", "attn.k", "attn.v", "attn.o", "ln2", "mlp.fc1", "mlp.fc2"];

impl BlockWeights {
    /// All-zero projections with unit norm gains: the block is the identity.
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        let z = |r, c| Array2::zeros((r, c));
        BlockWeights {
            ln1: (Array2::ones((1, dim)), z(1, dim)),
            q: (z(dim, dim), z(1, dim)),
            k: (z(dim, dim), z(1, dim)),
            v: (z(dim, dim), z(1, dim)),
            o: (z(dim, dim), z(1, dim)),
            ln2: (Array2::ones((1, dim)), z(1, dim)),
            fc1: (z(dim, hidden), z(1, hidden)),
            fc2: (z(hidden, dim), z(1, dim)),
        }
    }

    pub fn from_params(params: &ParamStore, prefix: &str) -> Result<Self> {
        let pair = |part: &str| -> Result<(Array2<f64>, Array2<f64>)> {
            let (a, b) = if part.starts_with("ln") { ("g", "b") } else { ("w", "b") };
            let get = |suffix: &str| {
                params
                    .by_name(&format!("{prefix}.{part}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("missing {prefix}.{part}.{suffix}")))
            };
            Ok((get(a)?, get(b)?))
        };
        Ok(BlockWeights {
            ln1: pair("ln1")?,
            q: pair("attn.q")?,
            k: pair("attn.k")?,
            v: pair("attn.v")?,
            o: pair("attn.o")?,
            ln2: pair("ln2")?,
            fc1: pair("mlp.fc1")?,
            fc2: pair("mlp.fc2")?,
        })
    }

    fn check(&self, dim: usize) -> Result<()> {
        let hidden = self.fc1.0.ncols();
        let want = [
            (&self.ln1, (1, dim), (1, dim)),
            (&self.q, (dim, dim), (1, dim)),
            (&self.k, (dim, dim), (1, dim)),
            (&self.v, (dim, dim), (1, dim)),
            (&self.o, (dim, dim), (1, dim)),
            (&self.ln2, (1, dim), (1, dim)),
            (&self.fc1, (dim, hidden), (1, hidden)),
            (&self.fc2, (hidden, dim), (1, dim)),
        ];
        for (i, (pair, a, b)) in want.iter().enumerate() {
            if pair.0.dim() != *a || pair.1.dim() != *b {
                return invalid(format!("block weight '{}' has the wrong shape", BLOCK_PARTS[i]));
            }
        }
        Ok(())
    }
}

impl BlockNodes {
    pub fn from_params(tape: &mut Tape<'_>, prefix: &str) -> Result<Self> {
        let mut pair = |part: &str| -> Result<(NodeId, NodeId)> {
            let a = if part.starts_with("ln") { "g" } else { "w" };
            Ok((
                tape.param_by_name(&format!("{prefix}.{part}.{a}"))?,
                tape.param_by_name(&format!("{prefix}.{part}.b"))?,
            ))
        };
        Ok(BlockNodes {
            ln1: pair("ln1")?,
            q: pair("attn.q")?,
            k: pair("attn.k")?,
            v: pair("attn.v")?,
            o: pair("attn.o")?,
            ln2: pair("ln2")?,
            fc1: pair("mlp.fc1")?,
            fc2: pair("mlp.fc2")?,
        })
    }

    pub fn from_weights(tape: &mut Tape<'_>, w: &BlockWeights) -> Self {
        let mut pair = |p: &(Array2<f64>, Array2<f64>)| (tape.constant(p.0.clone()), tape.constant(p.1.clone()));
        BlockNodes {
            ln1: pair(&w.ln1),
            q: pair(&w.q),
            k: pair(&w.k),
            v: pair(&w.v),
            o: pair(&w.o),
            ln2: pair(&w.ln2),
            fc1: pair(&w.fc1),
            fc2: pair(&w.fc2),
        }
    }
}

/// Relative-bias table column for every permitted pair; class-token pairs get none.
pub fn bias_indices(grid: GridDims, rows: &[Option<GridPos>], keys: &KeyLists) -> Vec<Option<usize>> {
    (0..keys.n_queries())
        .flat_map(|i| {
            keys.row(i).iter().map(move |&j| match (rows[i], rows[j]) {
                (Some(q), Some(k)) => Some(rel_index(grid, q, k)),
                _ => None,
            })
        })
        .collect()
}

/// Pre-norm self-attention sublayer; returns the updated stream and the
/// attention node (whose weights drive pruning).
pub fn self_attention(
    tape: &mut Tape<'_>,
    x: NodeId,
    b: &BlockNodes,
    heads: usize,
    keys: Arc<KeyLists>,
    bias: Option<(NodeId, Arc<Vec<Option<usize>>>)>,
) -> Result<(NodeId, NodeId)> {
    let h = tape.layer_norm(x, b.ln1.0, b.ln1.1)?;
    let q = tape.linear(h, b.q.0, b.q.1)?;
    let k = tape.linear(h, b.k.0, b.k.1)?;
    let v = tape.linear(h, b.v.0, b.v.1)?;
    let a = tape.attention(q, k, v, heads, keys, bias)?;
    let o = tape.linear(a, b.o.0, b.o.1)?;
    Ok((tape.add(x, o)?, a))
}

pub fn feed_forward(tape: &mut Tape<'_>, x: NodeId, b: &BlockNodes) -> Result<NodeId> {
    let h = tape.layer_norm(x, b.ln2.0, b.ln2.1)?;
    let h = tape.linear(h, b.fc1.0, b.fc1.1)?;
    let h = tape.gelu(h);
    let h = tape.linear(h, b.fc2.0, b.fc2.1)?;
    tape.add(x, h)
}

pub fn block(
    tape: &mut Tape<'_>,
    x: NodeId,
    b: &BlockNodes,
    heads: usize,
    keys: Arc<KeyLists>,
    bias: Option<(NodeId, Arc<Vec<Option<usize>>>)>,
) -> Result<(NodeId, NodeId)> {
    let (x, attn) = self_attention(tape, x, b, heads, keys, bias)?;
    Ok((feed_forward(tape, x, b)?, attn))
}

fn check_dims(tape: &Tape<'_>, x: NodeId, dim: usize) -> Result<()> {
    if tape.value(x).ncols() != dim {
        return invalid(format!("tokens have width {}, model expects {dim}", tape.value(x).ncols()));
    }
    Ok(())
}

/// Patch projection, class token, absolute positions, then reordering.
/// Returns the sequence node and the origin of each regional row.
pub fn embed_patches(tape: &mut Tape<'_>, cfg: &ModelConfig, patches: &Array2<f64>) -> Result<(NodeId, Vec<usize>)> {
    let n = cfg.n_regional();
    if patches.dim() != (n, cfg.patch_dim()) {
        return invalid(format!(
            "patch matrix is {:?}, config expects {:?}",
            patches.dim(),
            (n, cfg.patch_dim())
        ));
    }
    let x = tape.constant(patches.clone());
    let w = tape.param_by_name("vis.patch.w")?;
    let b = tape.param_by_name("vis.patch.b")?;
    let x = tape.linear(x, w, b)?;
    let pos = tape.param_by_name("vis.pos")?;
    let reg_pos = tape.gather_rows(pos, (1..=n).collect())?;
    let x = tape.add(x, reg_pos)?;
    let cls = tape.param_by_name("vis.cls")?;
    let cls_pos = tape.gather_rows(pos, vec![0])?;
    let cls = tape.add(cls, cls_pos)?;
    let seq = tape.concat_rows(&[cls, x])?;
    let order = reorder_tokens(cfg.grid(), cfg.order)?;
    if order.is_identity() {
        return Ok((seq, order.permutation));
    }
    let rows = std::iter::once(0).chain(order.permutation.iter().map(|p| p + 1)).collect();
    Ok((tape.gather_rows(seq, rows)?, order.permutation))
}

/// Outcome of the visual encoder on a tape.
pub struct VisualPass {
    /// `1 × d`, unit norm.
    pub z: NodeId,
    /// Final normalized tokens, class token first.
    pub tokens: NodeId,
    pub origin: Vec<usize>,
    /// `(layer, decision)` for each pruning site, `origin` as of that site.
    pub decisions: Vec<(usize, KeepDecision, Vec<usize>)>,
    /// Regional token count entering each layer.
    pub layer_tokens: Vec<usize>,
    /// Token stream just before each pruning site.
    pub pre_prune: Vec<NodeId>,
}

/// Visual encoder over already-patchified input. `edge_seed` fixes the
/// random block edges of every layer.
pub fn visual_pass(tape: &mut Tape<'_>, cfg: &ModelConfig, patches: &Array2<f64>, edge_seed: u64) -> Result<VisualPass> {
    let (mut x, mut origin) = embed_patches(tape, cfg, patches)?;
    let grid = cfg.grid();
    let mut decisions = Vec::new();
    let mut layer_tokens = Vec::new();
    let mut pre_prune = Vec::new();
    for l in 1..=cfg.visual_depth {
        let n = origin.len();
        layer_tokens.push(n);
        let keys = Arc::new(cfg.sparsity.key_lists(n, derive_seed(edge_seed, &[l as u64]))?);
        let idx = Arc::new(bias_indices(grid, &positions(grid, &origin), &keys));
        let prefix = visual_block(l);
        let nodes = BlockNodes::from_params(tape, &prefix)?;
        let rel = tape.param_by_name(&format!("{prefix}.rel"))?;
        let (y, attn) = block(tape, x, &nodes, cfg.heads, keys, Some((rel, idx)))?;
        x = y;
        if let Some(q) = cfg.prune.visual_rate(l) {
            let (probs, keys, heads) = tape.attention_probs(attn).expect("attention node");
            let scores = query_scores(probs, keys, heads, 0)?;
            let decision = select_keep(&scores, q)?;
            pre_prune.push(x);
            let rows = std::iter::once(0).chain(decision.kept_indices.iter().map(|k| k + 1)).collect();
            x = tape.gather_rows(x, rows)?;
            let before = std::mem::take(&mut origin);
            origin = decision.kept_indices.iter().map(|&k| before[k]).collect();
            decisions.push((l, decision, before));
        }
    }
    let g = tape.param_by_name("vis.ln.g")?;
    let b = tape.param_by_name("vis.ln.b")?;
    let tokens = tape.layer_norm(x, g, b)?;
    let cls = tape.gather_rows(tokens, vec![0])?;
    let proj = tape.param_by_name("vis.proj.w")?;
    let z = tape.matmul(cls, proj)?;
    let z = tape.l2_normalize_rows(z);
    Ok(VisualPass {
        z,
        tokens,
        origin,
        decisions,
        layer_tokens,
        pre_prune,
    })
}

pub struct TextPass {
    /// `1 × d`, unit norm.
    pub z: NodeId,
    /// Residual stream after the text-only layers, class token first.
    pub hidden: NodeId,
}

pub fn check_text(cfg: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.len() > cfg.text_len {
        return invalid(format!("{} text tokens exceed limit {}", ids.len(), cfg.text_len));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab) {
        return invalid(format!("token id {id} outside vocabulary of {}", cfg.vocab));
    }
    Ok(())
}

pub fn text_pass(tape: &mut Tape<'_>, cfg: &ModelConfig, ids: &[usize]) -> Result<TextPass> {
    check_text(cfg, ids)?;
    let tok = tape.param_by_name("txt.tok")?;
    let pos = tape.param_by_name("txt.pos")?;
    let seq: Vec<usize> = std::iter::once(CLS_ID).chain(ids.iter().copied()).collect();
    let len = seq.len();
    let e = tape.gather_rows(tok, seq)?;
    let p = tape.gather_rows(pos, (0..len).collect())?;
    let mut x = tape.add(e, p)?;
    let keys = Arc::new(KeyLists::complete(len, len));
    for l in 1..=cfg.text_only_depth() {
        let nodes = BlockNodes::from_params(tape, &text_block(l))?;
        x = block(tape, x, &nodes, cfg.heads, keys.clone(), None)?.0;
    }
    let cls = tape.gather_rows(x, vec![0])?;
    let g = tape.param_by_name("txt.ln.g")?;
    let b = tape.param_by_name("txt.ln.b")?;
    let cls = tape.layer_norm(cls, g, b)?;
    let proj = tape.param_by_name("txt.proj.w")?;
    let z = tape.matmul(cls, proj)?;
    let z = tape.l2_normalize_rows(z);
    Ok(TextPass { z, hidden: x })
}

pub struct FusionPass {
    /// Final normalized text-side features, class token first.
    pub fused: NodeId,
    pub decision: Option<KeepDecision>,
    /// Visual keys (class token included) seen by each multimodal layer.
    pub visual_keys: Vec<usize>,
}

/// Multimodal layers: text self-attention, text-to-video cross-attention,
/// feed-forward. After each layer listed in `prune`, visual keys are reduced
/// by the text class token's cross-attention.
pub fn fusion_pass(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    text_hidden: NodeId,
    visual: NodeId,
    prune: &PruneSchedule,
) -> Result<FusionPass> {
    check_dims(tape, text_hidden, cfg.dim)?;
    check_dims(tape, visual, cfg.dim)?;
    if tape.value(visual).nrows() < 2 {
        return invalid("multimodal layers need at least one regional visual token");
    }
    let len = tape.value(text_hidden).nrows();
    let self_keys = Arc::new(KeyLists::complete(len, len));
    let mut x = text_hidden;
    let mut vis = visual;
    let mut decision = None;
    let mut visual_keys = Vec::new();
    for l in 1..=cfg.multimodal_depth {
        let p = fusion_block(l);
        let nodes = BlockNodes::from_params(tape, &p)?;
        x = self_attention(tape, x, &nodes, cfg.heads, self_keys.clone(), None)?.0;

        let nv = tape.value(vis).nrows();
        visual_keys.push(nv);
        let lg = tape.param_by_name(&format!("{p}.xattn.ln.g"))?;
        let lb = tape.param_by_name(&format!("{p}.xattn.ln.b"))?;
        let h = tape.layer_norm(x, lg, lb)?;
        let proj = |name: &str, input: NodeId, tape: &mut Tape<'_>| -> Result<NodeId> {
            let w = tape.param_by_name(&format!("{p}.xattn.{name}.w"))?;
            let b = tape.param_by_name(&format!("{p}.xattn.{name}.b"))?;
            tape.linear(input, w, b)
        };
        let q = proj("q", h, tape)?;
        let k = proj("k", vis, tape)?;
        let v = proj("v", vis, tape)?;
        let keys = Arc::new(KeyLists::complete(len, nv));
        let a = tape.attention(q, k, v, cfg.heads, keys, None)?;
        let o = proj("o", a, tape)?;
        x = tape.add(x, o)?;
        x = feed_forward(tape, x, &nodes)?;

        if let Some(qm) = prune.multimodal_rate(l) {
            let (probs, keys, heads) = tape.attention_probs(a).expect("attention node");
            let scores = query_scores(probs, keys, heads, 0)?;
            let d = select_keep(&scores, qm)?;
            let rows = std::iter::once(0).chain(d.kept_indices.iter().map(|k| k + 1)).collect();
            vis = tape.gather_rows(vis, rows)?;
            decision = Some(d);
        }
    }
    let g = tape.param_by_name("mm.ln.g")?;
    let b = tape.param_by_name("mm.ln.b")?;
    let fused = tape.layer_norm(x, g, b)?;
    Ok(FusionPass {
        fused,
        decision,
        visual_keys,
    })
}

/// Matching logit from the fused class token (`1 × 1`).
pub fn vtm_logit(tape: &mut Tape<'_>, fused: NodeId) -> Result<NodeId> {
    let cls = tape.gather_rows(fused, vec![0])?;
    let w = tape.param_by_name("vtm.head.w")?;
    let b = tape.param_by_name("vtm.head.b")?;
    tape.linear(cls, w, b)
}

/// Vocabulary logits at the given sequence rows.
pub fn mlm_logits(tape: &mut Tape<'_>, fused: NodeId, rows: Vec<usize>) -> Result<NodeId> {
    let h = tape.gather_rows(fused, rows)?;
    let w = tape.param_by_name("mlm.head.w")?;
    let b = tape.param_by_name("mlm.head.b")?;
    tape.linear(h, w, b)
}

/// Patch projection plus positions, in the configured token order.
pub fn tokenize(clip: &Clip, model: &Model) -> Result<TokenSequence> {
    let cfg = &model.config;
    let (t, h, w, c) = clip.dim();
    if h % cfg.patch != 0 || w % cfg.patch != 0 {
        return invalid(format!("frame {h}x{w} not divisible by patch {}", cfg.patch));
    }
    if (t, h, w, c) != (cfg.frames, cfg.frame_height, cfg.frame_width, cfg.channels) {
        return invalid(format!(
            "clip is {t}x{h}x{w}x{c}, model expects {}x{}x{}x{}",
            cfg.frames, cfg.frame_height, cfg.frame_width, cfg.channels
        ));
    }
    let patches = patchify(clip, cfg.patch)?;
    let mut tape = Tape::new(&model.params);
    let (x, origin) = embed_patches(&mut tape, cfg, &patches)?;
    TokenSequence::with_origin(tape.value(x).clone(), cfg.grid(), origin)
}

/// One pre-norm transformer block over `tokens` restricted to `edges`.
pub fn encoder_block(
    tokens: &TokenSequence,
    edges: &EdgeSet,
    weights: &BlockWeights,
    heads: usize,
    bias: Option<&RelPosBias>,
) -> Result<TokenSequence> {
    let dim = tokens.embeddings.ncols();
    weights.check(dim)?;
    if edges.n_tokens() != tokens.n_regional() {
        return invalid(format!(
            "edge set covers {} tokens, sequence has {}",
            edges.n_tokens(),
            tokens.n_regional()
        ));
    }
    let mut tape = Tape::detached();
    let x = tape.constant(tokens.embeddings.clone());
    let nodes = BlockNodes::from_weights(&mut tape, weights);
    let keys = Arc::new(KeyLists::from_edge_set(edges));
    let bias = match bias {
        Some(b) => {
            if b.n_heads() != heads || b.dims != tokens.grid {
                return invalid("relative bias does not match heads or grid");
            }
            let idx = bias_indices(tokens.grid, &tokens.positions(), &keys);
            Some((tape.constant(b.table.clone()), Arc::new(idx)))
        }
        None => None,
    };
    let (y, _) = block(&mut tape, x, &nodes, heads, keys, bias)?;
    Ok(TokenSequence {
        embeddings: tape.value(y).clone(),
        grid: tokens.grid,
        origin: tokens.origin.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct VideoOutput {
    pub z_v: Array1<f64>,
    pub tokens: TokenSequence,
    pub decisions: Vec<(usize, KeepDecision)>,
    pub layer_tokens: Vec<usize>,
}

pub fn video_encoder_forward(clip: &Clip, model: &Model, edge_seed: u64) -> Result<VideoOutput> {
    let cfg = &model.config;
    let dims = clip.dim();
    if dims != (cfg.frames, cfg.frame_height, cfg.frame_width, cfg.channels) {
        return invalid(format!("clip shape {dims:?} does not match the model config"));
    }
    let patches = patchify(clip, cfg.patch)?;
    let mut tape = Tape::new(&model.params);
    let pass = visual_pass(&mut tape, cfg, &patches, edge_seed)?;
    Ok(VideoOutput {
        z_v: tape.value(pass.z).row(0).to_owned(),
        tokens: TokenSequence::with_origin(tape.value(pass.tokens).clone(), cfg.grid(), pass.origin)?,
        decisions: pass.decisions.into_iter().map(|(l, d, _)| (l, d)).collect(),
        layer_tokens: pass.layer_tokens,
    })
}

#[derive(Debug, Clone)]
pub struct TextOutput {
    pub z_t: Array1<f64>,
    pub tokens: TokenSequence,
}

pub fn text_encoder_forward(ids: &[usize], model: &Model) -> Result<TextOutput> {
    let mut tape = Tape::new(&model.params);
    let pass = text_pass(&mut tape, &model.config, ids)?;
    Ok(TextOutput {
        z_t: tape.value(pass.z).row(0).to_owned(),
        tokens: TokenSequence::new(tape.value(pass.hidden).clone(), GridDims::new(1, 1, ids.len()))?,
    })
}

#[derive(Debug, Clone)]
pub struct MultimodalOutput {
    pub fused: Array2<f64>,
    pub vtm_logit: f64,
    pub decision: Option<KeepDecision>,
    pub visual_keys: Vec<usize>,
}

/// Fuses final visual tokens with text hidden states; `q_m < 1` prunes the
/// visual keys once, after the first multimodal layer.
pub fn multimodal_forward(video: &TokenSequence, text: &TokenSequence, model: &Model, q_m: f64) -> Result<MultimodalOutput> {
    if video.n_regional() == 0 {
        return invalid("visual sequence has no regional tokens");
    }
    if !video.embeddings.iter().chain(text.embeddings.iter()).all(|x| x.is_finite()) {
        return invalid("non-finite input features");
    }
    let schedule = PruneSchedule::uniform(&[], 1.0, q_m);
    if q_m <= 0.0 || q_m > 1.0 {
        return invalid(format!("q_m must be in (0, 1], got {q_m}"));
    }
    let mut tape = Tape::new(&model.params);
    let t = tape.constant(text.embeddings.clone());
    let v = tape.constant(video.embeddings.clone());
    let pass = fusion_pass(&mut tape, &model.config, t, v, &schedule)?;
    let logit = vtm_logit(&mut tape, pass.fused)?;
    Ok(MultimodalOutput {
        fused: tape.value(pass.fused).clone(),
        vtm_logit: tape.scalar(logit),
        decision: pass.decision,
        visual_keys: pass.visual_keys,
    })
}

/// Repeats a spatial table `(H'W' + 1) × d` across `t` frames; the class row is copied once.
pub fn inflate_pos_embed(plane: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
    if t == 0 || plane.nrows() == 0 {
        return invalid("inflation needs t >= 1 and a class row");
    }
    let hw = plane.nrows() - 1;
    let mut rows = vec![0];
    for _ in 0..t {
        rows.extend(1..=hw);
    }
    Ok(plane.select(Axis(0), &rows))
}

/// Nearest-neighbour source frame (1-based) for each target frame `1..=t2`:
/// `⌊t·t1/t2 + 1/2⌋`, clamped into `1..=t1`.
pub fn interpolation_sources(t1: usize, t2: usize) -> Result<Vec<usize>> {
    if t1 == 0 || t2 == 0 {
        return invalid("frame counts must be >= 1");
    }
    Ok((1..=t2)
        .map(|t| ((2 * t * t1 + t2) / (2 * t2)).clamp(1, t1))
        .collect())
}

/// Resamples an absolute table `(t1·H'W' + 1) × d` to `t2` frames.
pub fn interpolate_pos_embed(table: &Array2<f64>, t1: usize, t2: usize) -> Result<Array2<f64>> {
    let reg = table.nrows().saturating_sub(1);
    if t1 == 0 || !reg.is_multiple_of(t1) {
        return invalid(format!("{reg} regional rows do not split into {t1} frames"));
    }
    let hw = reg / t1;
    let mut rows = vec![0];
    for src in interpolation_sources(t1, t2)? {
        rows.extend((src - 1) * hw + 1..=src * hw);
    }
    Ok(table.select(Axis(0), &rows))
}

/// Resamples the temporal offset slices of a relative-bias table from
/// `2·t1 − 1` to `2·t2 − 1` slices using the same nearest-neighbour rule.
pub fn interpolate_rel_pos_bias(table: &Array2<f64>, t1: usize, t2: usize) -> Result<Array2<f64>> {
    if t1 == 0 || t2 == 0 {
        return invalid("frame counts must be >= 1");
    }
    let (s1, s2) = (2 * t1 - 1, 2 * t2 - 1);
    if !table.ncols().is_multiple_of(s1) {
        return invalid(format!("{} columns do not split into {s1} slices", table.ncols()));
    }
    let plane = table.ncols() / s1;
    let mut cols = Vec::with_capacity(plane * s2);
    for src in interpolation_sources(s1, s2)? {
        cols.extend((src - 1) * plane..src * plane);
    }
    Ok(table.select(Axis(1), &cols))
}

/// Lifts a spatial bias table `heads × (2H'−1)(2W'−1)` to `t` frames.
pub fn inflate_rel_pos_bias(table: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
    interpolate_rel_pos_bias(table, 1, t)
}

/// Draws a random clip with values in `[0, 1)`.
pub fn random_clip<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Clip {
    Array4::from_shape_fn(
        (cfg.frames, cfg.frame_height, cfg.frame_width, cfg.channels),
        |_| rng.gen::<f64>(),
    )
}
