//! Sparse attention graph construction.
//!
//! Regional tokens are chunked into contiguous blocks; each block attends to a
//! clipped local window of blocks plus a few randomly sampled distant blocks,
//! and the class token is linked to and from every regional token. Token
//! indices used by [`EdgeSet::contains`] and [`KeyLists`] are sequence
//! positions: `0` is the class token, `1..=n` are regional tokens.

use std::fmt::Write as _;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Regional tokens chunked into `n_blocks` blocks of `block_size`; the last
/// block carries `pad` padding slots that never take part in attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub n_tokens: usize,
    pub block_size: usize,
    pub n_blocks: usize,
    pub pad: usize,
}

pub fn chunk_blocks(n_tokens: usize, block_size: usize) -> Result<BlockLayout> {
    if n_tokens == 0 || block_size == 0 {
        return invalid(format!(
            "chunk_blocks needs n_tokens >= 1 and block_size >= 1 (got {n_tokens}, {block_size})"
        ));
    }
    let n_blocks = n_tokens.div_ceil(block_size);
    Ok(BlockLayout {
        n_tokens,
        block_size,
        n_blocks,
        pad: n_blocks * block_size - n_tokens,
    })
}

impl BlockLayout {
    /// Regional token indices (0-based, padding excluded) covered by block `k`.
    pub fn block_range(&self, k: usize) -> Range<usize> {
        let start = k * self.block_size;
        start.min(self.n_tokens)..((k + 1) * self.block_size).min(self.n_tokens)
    }

    pub fn block_len(&self, k: usize) -> usize {
        self.block_range(k).len()
    }

    pub fn block_of(&self, regional: usize) -> usize {
        regional / self.block_size
    }
}

fn local_radius(k_local: usize) -> Result<usize> {
    if k_local == 0 || k_local.is_multiple_of(2) {
        return invalid(format!("K_l must be odd and >= 1 (got {k_local})"));
    }
    Ok((k_local - 1) / 2)
}

fn local_window(layout: &BlockLayout, radius: usize, k: usize) -> Range<usize> {
    k.saturating_sub(radius)..(k + radius + 1).min(layout.n_blocks)
}

/// Block pairs `(k, k')` with `|k' - k| <= Δ`, clipped at the sequence ends.
pub fn build_local_edges(layout: &BlockLayout, k_local: usize) -> Result<Vec<(usize, usize)>> {
    let radius = local_radius(k_local)?;
    Ok((0..layout.n_blocks)
        .flat_map(|k| local_window(layout, radius, k).map(move |j| (k, j)))
        .collect())
}

/// Per-block random neighbours drawn without replacement from the blocks
/// outside the local window. Lists are sorted ascending.
pub fn build_random_edges<R: Rng + ?Sized>(
    layout: &BlockLayout,
    k_local: usize,
    k_random: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let radius = local_radius(k_local)?;
    Ok((0..layout.n_blocks)
        .map(|k| {
            let candidates: Vec<usize> = (0..layout.n_blocks)
                .filter(|&j| j.abs_diff(k) > radius)
                .collect();
            let amount = k_random.min(candidates.len());
            let mut picked: Vec<usize> = sample(rng, candidates.len(), amount)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            picked.sort_unstable();
            picked
        })
        .collect())
}

/// Directed edges contributed by the class token: `(cls, i)` and `(i, cls)`
/// for every regional token, plus the class self-edge.
pub fn build_global_edges(n_tokens: usize) -> u64 {
    2 * n_tokens as u64 + 1
}

/// The attention graph of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    pub layout: BlockLayout,
    pub local_radius: usize,
    pub random_neighbors: Vec<Vec<usize>>,
    pub has_global: bool,
}

impl EdgeSet {
    pub fn new<R: Rng + ?Sized>(
        layout: BlockLayout,
        k_local: usize,
        k_random: usize,
        has_global: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let random_neighbors = build_random_edges(&layout, k_local, k_random, rng)?;
        Ok(EdgeSet {
            layout,
            local_radius: local_radius(k_local)?,
            random_neighbors,
            has_global,
        })
    }

    pub fn seeded(
        layout: BlockLayout,
        k_local: usize,
        k_random: usize,
        has_global: bool,
        seed: u64,
    ) -> Result<Self> {
        Self::new(
            layout,
            k_local,
            k_random,
            has_global,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    /// Every token attends every token: one block spanning the sequence.
    pub fn complete(n_tokens: usize) -> Result<Self> {
        let layout = chunk_blocks(n_tokens, n_tokens)?;
        Ok(EdgeSet {
            layout,
            local_radius: 0,
            random_neighbors: vec![Vec::new()],
            has_global: true,
        })
    }

    /// Block-diagonal attention plus global edges.
    pub fn diagonal(layout: BlockLayout) -> Self {
        EdgeSet {
            random_neighbors: vec![Vec::new(); layout.n_blocks],
            layout,
            local_radius: 0,
            has_global: true,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.layout.n_tokens
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.layout.n_tokens + 1
    }

    pub fn local_blocks(&self, k: usize) -> Range<usize> {
        local_window(&self.layout, self.local_radius, k)
    }

    /// Blocks attended by block `k`, ascending.
    pub fn block_neighbors(&self, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.local_blocks(k).collect();
        out.extend_from_slice(&self.random_neighbors[k]);
        out.sort_unstable();
        out
    }

    /// Whether sequence position `query` may attend sequence position `key`.
    pub fn contains(&self, query: usize, key: usize) -> bool {
        let seq = self.seq_len();
        if query >= seq || key >= seq {
            return false;
        }
        if query == 0 || key == 0 {
            return self.has_global;
        }
        let (qb, kb) = (
            self.layout.block_of(query - 1),
            self.layout.block_of(key - 1),
        );
        qb.abs_diff(kb) <= self.local_radius || self.random_neighbors[qb].contains(&kb)
    }

    /// Checks the structural invariants of the random neighbour lists.
    pub fn validate(&self) -> Result<()> {
        if self.random_neighbors.len() != self.layout.n_blocks {
            return Err(Error::Invariant(format!(
                "{} random lists for {} blocks",
                self.random_neighbors.len(),
                self.layout.n_blocks
            )));
        }
        for (k, list) in self.random_neighbors.iter().enumerate() {
            for (i, &j) in list.iter().enumerate() {
                if j >= self.layout.n_blocks || j.abs_diff(k) <= self.local_radius {
                    return Err(Error::Invariant(format!(
                        "block {k} has invalid random neighbour {j}"
                    )));
                }
                if list[..i].contains(&j) {
                    return Err(Error::Invariant(format!(
                        "block {k} lists neighbour {j} twice"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Plain-text adjacency listing, one `block_k: [neighbours]` line per block.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        for k in 0..self.layout.n_blocks {
            let list: Vec<String> = self
                .block_neighbors(k)
                .iter()
                .map(|b| b.to_string())
                .collect();
            let _ = writeln!(out, "block_{k}: [{}]", list.join(", "));
        }
        out
    }
}

/// Exact number of directed token-level edges: padding excluded, global edges
/// included when present.
pub fn count_edges(edges: &EdgeSet) -> u64 {
    let layout = &edges.layout;
    let regional: u64 = (0..layout.n_blocks)
        .map(|k| {
            let keys: usize = edges
                .block_neighbors(k)
                .into_iter()
                .map(|j| layout.block_len(j))
                .sum();
            (layout.block_len(k) * keys) as u64
        })
        .sum();
    regional
        + if edges.has_global {
            build_global_edges(layout.n_tokens)
        } else {
            0
        }
}

/// Compressed per-query key lists over sequence positions (class token at 0).
///
/// Row `i` lists, in ascending order, every key that query `i` may attend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyLists {
    offsets: Vec<usize>,
    keys: Vec<usize>,
    n_keys: usize,
}

impl KeyLists {
    pub fn complete(n_queries: usize, n_keys: usize) -> Self {
        KeyLists {
            offsets: (0..=n_queries).map(|i| i * n_keys).collect(),
            keys: (0..n_queries).flat_map(|_| 0..n_keys).collect(),
            n_keys,
        }
    }

    pub fn from_edge_set(edges: &EdgeSet) -> Self {
        let layout = &edges.layout;
        let seq = edges.seq_len();
        let block_keys: Vec<Vec<usize>> = (0..layout.n_blocks)
            .map(|k| {
                let mut keys = Vec::new();
                if edges.has_global {
                    keys.push(0);
                }
                for j in edges.block_neighbors(k) {
                    keys.extend(layout.block_range(j).map(|r| r + 1));
                }
                keys
            })
            .collect();
        let mut offsets = Vec::with_capacity(seq + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        if edges.has_global {
            keys.extend(0..seq);
        }
        offsets.push(keys.len());
        for r in 0..layout.n_tokens {
            keys.extend_from_slice(&block_keys[layout.block_of(r)]);
            offsets.push(keys.len());
        }
        KeyLists {
            offsets,
            keys,
            n_keys: seq,
        }
    }

    /// Builds lists from arbitrary per-query rows; each row is sorted and deduplicated.
    pub fn from_rows(rows: Vec<Vec<usize>>, n_keys: usize) -> Result<Self> {
        let mut offsets = vec![0];
        let mut keys = Vec::new();
        for mut row in rows {
            row.sort_unstable();
            row.dedup();
            if row.last().is_some_and(|&k| k >= n_keys) {
                return invalid(format!("key index out of range (n_keys = {n_keys})"));
            }
            keys.extend(row);
            offsets.push(keys.len());
        }
        Ok(KeyLists {
            offsets,
            keys,
            n_keys,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.keys[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn row_offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Total number of (query, key) pairs.
    pub fn nnz(&self) -> usize {
        self.keys.len()
    }
}

/// Position of a regional token in the `(t, h, w)` patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPos {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

/// Patch-grid dimensions `(T, H', W')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        GridDims { t, h, w }
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn per_frame(&self) -> usize {
        self.h * self.w
    }

    /// Row-major `(t, h, w)` coordinates of flat index `i`.
    pub fn coords(&self, i: usize) -> GridPos {
        GridPos {
            t: i / (self.h * self.w),
            h: (i / self.w) % self.h,
            w: i % self.w,
        }
    }

    pub fn index(&self, p: GridPos) -> usize {
        (p.t * self.h + p.h) * self.w + p.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderScheme {
    #[default]
    Standard,
    Morton,
    Hilbert,
}

impl FromStr for OrderScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(OrderScheme::Standard),
            "morton" => Ok(OrderScheme::Morton),
            "hilbert" => Ok(OrderScheme::Hilbert),
            other => invalid(format!("unsupported token order '{other}'")),
        }
    }
}

/// `permutation[p]` is the row-major grid index of the token placed at position `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenOrder {
    pub scheme: OrderScheme,
    pub permutation: Vec<usize>,
}

impl TokenOrder {
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (pos, &src) in self.permutation.iter().enumerate() {
            inv[src] = pos;
        }
        inv
    }

    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.permutation.iter().map(|&i| items[i].clone()).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }
}

/// Bit-interleaved key with `w` in the least significant position, then `h`, then `t`.
fn morton_key(p: GridPos) -> u128 {
    let mut key = 0u128;
    for bit in 0..40 {
        key |= (((p.w >> bit) & 1) as u128) << (3 * bit);
        key |= (((p.h >> bit) & 1) as u128) << (3 * bit + 1);
        key |= (((p.t >> bit) & 1) as u128) << (3 * bit + 2);
    }
    key
}

/// Distance along a Hilbert curve on a `side × side` square (`side` a power of two).
fn hilbert_d(side: usize, mut x: usize, mut y: usize) -> usize {
    let mut d = 0;
    let mut s = side / 2;
    while s > 0 {
        let rx = usize::from(x & s > 0);
        let ry = usize::from(y & s > 0);
        d += s * s * ((3 * rx) ^ ry);
        if ry == 0 {
            if rx == 1 {
                x = side - 1 - x;
                y = side - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        s /= 2;
    }
    d
}

/// Token permutation for a space-filling-curve scheme. Hilbert order is
/// applied within each frame, frames concatenated in time order.
pub fn reorder_tokens(grid: GridDims, scheme: OrderScheme) -> Result<TokenOrder> {
    if grid.t == 0 || grid.h == 0 || grid.w == 0 {
        return invalid("grid dimensions must be >= 1");
    }
    let mut permutation: Vec<usize> = (0..grid.volume()).collect();
    match scheme {
        OrderScheme::Standard => {}
        OrderScheme::Morton => permutation.sort_by_key(|&i| morton_key(grid.coords(i))),
        OrderScheme::Hilbert => {
            let side = grid.h.max(grid.w).next_power_of_two();
            permutation.sort_by_key(|&i| {
                let p = grid.coords(i);
                (p.t, hilbert_d(side, p.w, p.h))
            });
        }
    }
    Ok(TokenOrder {
        scheme,
        permutation,
    })
}
