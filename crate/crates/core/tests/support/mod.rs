//! Reference implementations written with plain loops over `Vec<f64>`,
//! sharing no code with the crate beyond reading parameter values.

#![allow(dead_code)]

pub mod suites;

use svitt::encoder::{Clip, Model};
use svitt::topology::EdgeSet;

pub type Mat = Vec<Vec<f64>>;

pub fn param(model: &Model, name: &str) -> Mat {
    let v = model.params.by_name(name).unwrap_or_else(|| panic!("missing {name}"));
    v.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn linear(x: &Mat, w: &Mat, b: Option<&Mat>) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| {
                    let mut acc = b.map_or(0.0, |b| b[0][j]);
                    for (k, xv) in row.iter().enumerate() {
                        acc += xv * w[k][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * g[0][j] + b[0][j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Every-pair attention with an optional additive bias `bias(head, i, j)`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, bias: &dyn Fn(usize, usize, usize) -> f64) -> Mat {
    let d = q[0].len();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let logits: Vec<f64> = (0..k.len())
                .map(|j| {
                    let dot: f64 = (h * hd..(h + 1) * hd).map(|c| q[i][c] * k[j][c]).sum();
                    dot * scale + bias(h, i, j)
                })
                .collect();
            let p = softmax(&logits);
            for (j, pj) in p.iter().enumerate() {
                for c in h * hd..(h + 1) * hd {
                    out[i][c] += pj * v[j][c];
                }
            }
        }
    }
    out
}

/// Attention restricted to the pairs an edge set permits.
pub fn masked_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, edges: &EdgeSet) -> Mat {
    let d = q[0].len();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let allowed: Vec<usize> = (0..k.len()).filter(|&j| edges.contains(i, j)).collect();
            let logits: Vec<f64> = allowed
                .iter()
                .map(|&j| (h * hd..(h + 1) * hd).map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                .collect();
            for (&j, pj) in allowed.iter().zip(softmax(&logits)) {
                for c in h * hd..(h + 1) * hd {
                    out[i][c] += pj * v[j][c];
                }
            }
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Dense visual encoder in row-major `(t, h, w)` token order, no pruning.
/// Returns the unit class feature and the final normalized tokens.
pub fn dense_video_encoder(clip: &Clip, model: &Model) -> (Vec<f64>, Mat) {
    let cfg = &model.config;
    let (t, hh, ww, ch) = clip.dim();
    let p = cfg.patch;
    let (gh, gw) = (hh / p, ww / p);
    let mut patches = Vec::new();
    for f in 0..t {
        for i in 0..gh {
            for j in 0..gw {
                let mut row = Vec::new();
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..ch {
                            row.push(clip[[f, i * p + y, j * p + x, c]]);
                        }
                    }
                }
                patches.push(row);
            }
        }
    }
    let n = patches.len();
    let pos = param(model, "vis.pos");
    let emb = linear(&patches, &param(model, "vis.patch.w"), Some(&param(model, "vis.patch.b")));
    let cls = param(model, "vis.cls");
    let mut x: Mat = vec![cls[0].iter().zip(&pos[0]).map(|(a, b)| a + b).collect()];
    for (r, e) in emb.iter().enumerate() {
        x.push(e.iter().zip(&pos[r + 1]).map(|(a, b)| a + b).collect());
    }
    let coord = |r: usize| {
        let r = r - 1;
        (r / (gh * gw), (r / gw) % gh, r % gw)
    };
    let (wh, ww2) = (2 * gh - 1, 2 * gw - 1);
    for l in 1..=cfg.visual_depth {
        let pre = format!("vis.blk{l}");
        let g = |s: &str| param(model, &format!("{pre}.{s}"));
        let rel = g("rel");
        let h = layer_norm(&x, &g("ln1.g"), &g("ln1.b"));
        let q = linear(&h, &g("attn.q.w"), Some(&g("attn.q.b")));
        let k = linear(&h, &g("attn.k.w"), Some(&g("attn.k.b")));
        let v = linear(&h, &g("attn.v.w"), Some(&g("attn.v.b")));
        let bias = |head: usize, i: usize, j: usize| {
            if i == 0 || j == 0 {
                return 0.0;
            }
            let (ti, hi, wi) = coord(i);
            let (tj, hj, wj) = coord(j);
            let dt = tj + t - 1 - ti;
            let dh = hj + gh - 1 - hi;
            let dw = wj + gw - 1 - wi;
            rel[head][(dt * wh + dh) * ww2 + dw]
        };
        let a = attention(&q, &k, &v, cfg.heads, &bias);
        x = add(&x, &linear(&a, &g("attn.o.w"), Some(&g("attn.o.b"))));
        let h = layer_norm(&x, &g("ln2.g"), &g("ln2.b"));
        let mut h = linear(&h, &g("mlp.fc1.w"), Some(&g("mlp.fc1.b")));
        h.iter_mut().flatten().for_each(|v| *v = gelu(*v));
        x = add(&x, &linear(&h, &g("mlp.fc2.w"), Some(&g("mlp.fc2.b"))));
    }
    assert_eq!(x.len(), n + 1);
    let tokens = layer_norm(&x, &param(model, "vis.ln.g"), &param(model, "vis.ln.b"));
    let z = linear(&tokens[..1].to_vec(), &param(model, "vis.proj.w"), None).remove(0);
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    (z.iter().map(|v| v / norm).collect(), tokens)
}

/// Perturbs every parameter deterministically so zero-initialized tables
/// and biases take part in the comparison.
pub fn jitter(model: &mut Model, amount: f64) {
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        model
            .params
            .value_mut(id)
            .indexed_iter_mut()
            .for_each(|((r, c), x)| *x += amount * ((((k * 131 + r * 17 + c * 7) % 23) as f64) / 11.0 - 1.0));
    }
}
