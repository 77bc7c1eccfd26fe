//! Checks shared by the unit-style tests and the acceptance runner. Each
//! returns a short summary on success and a description of the first
//! mismatch otherwise.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svitt::attention::{dense_attention, sparse_attention, AttentionInputs};
use svitt::costmodel::{edge_profile, CostConfig, CostDims, EdgeMode};
use svitt::encoder::{random_clip, video_encoder_forward, Model, ModelConfig, SparsityConfig};
use svitt::gradengine::{finite_difference, Gradients, NodeId, ParamStore, Tape, Tensor};
use svitt::harness::{step_gradients, Corpus, CorpusSpec};
use svitt::pruning::PruneSchedule;
use svitt::seed::derive_seed;
use svitt::topology::{chunk_blocks, count_edges, EdgeSet, KeyLists};
use svitt::Execution;

use super::Mat;

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn max_abs(a: &Array2<f64>, b: &Mat) -> f64 {
    a.indexed_iter().map(|((i, j), v)| (v - b[i][j]).abs()).fold(0.0, f64::max)
}

/// Complete-graph sparse attention (and the dense kernel) against the loop
/// reference on `instances` random problems with N ≤ 512.
pub fn complete_graph_attention(instances: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for case in 0..instances {
        let n = rng.gen_range(1..=511);
        let heads = rng.gen_range(1..=4);
        let d = heads * rng.gen_range(1..=4);
        let (q, k, v) = (random_mat(&mut rng, n + 1, d), random_mat(&mut rng, n + 1, d), random_mat(&mut rng, n + 1, d));
        let inputs = AttentionInputs::new(q.clone(), k.clone(), v.clone(), heads).map_err(|e| e.to_string())?;
        let sparse = sparse_attention(&inputs, &EdgeSet::complete(n).unwrap(), None).map_err(|e| e.to_string())?;
        let reference = super::attention(&to_mat(&q), &to_mat(&k), &to_mat(&v), heads, &|_, _, _| 0.0);
        let dense = dense_attention(&inputs, None).map_err(|e| e.to_string())?;
        let err = max_abs(&sparse, &reference).max(max_abs(&dense, &reference));
        ensure(err <= 1e-6, || format!("case {case} (N={n}): max error {err:.2e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("{instances} instances, max |err| {worst:.1e}"))
}

/// Random block-sparse graphs against attention over an explicit mask.
pub fn block_sparse_attention(instances: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.gen_range(1..=200);
        let g = rng.gen_range(1..=16);
        let kl = 2 * rng.gen_range(0..3) + 1;
        let kr = rng.gen_range(0..4);
        let edges = EdgeSet::seeded(chunk_blocks(n, g).unwrap(), kl, kr, true, rng.gen()).unwrap();
        let (q, k, v) = (random_mat(&mut rng, n + 1, 8), random_mat(&mut rng, n + 1, 8), random_mat(&mut rng, n + 1, 8));
        let inputs = AttentionInputs::new(q.clone(), k.clone(), v.clone(), 2).map_err(|e| e.to_string())?;
        let got = sparse_attention(&inputs, &edges, None).map_err(|e| e.to_string())?;
        let err = max_abs(&got, &super::masked_attention(&to_mat(&q), &to_mat(&k), &to_mat(&v), 2, &edges));
        ensure(err <= 1e-9, || format!("n={n} g={g} kl={kl} kr={kr}: max error {err:.2e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("{instances} instances, max |err| {worst:.1e}"))
}

fn pipeline_config(sparsity: SparsityConfig, prune: PruneSchedule) -> ModelConfig {
    ModelConfig {
        frames: 3,
        frame_height: 16,
        frame_width: 24,
        dim: 16,
        heads: 4,
        visual_depth: 4,
        sparsity,
        prune,
        ..ModelConfig::default()
    }
}

fn pipeline_error(cfg: ModelConfig, seed: u64) -> f64 {
    let mut model = Model::init(cfg, seed).unwrap();
    super::jitter(&mut model, 0.05);
    let clip = random_clip(&model.config, &mut ChaCha8Rng::seed_from_u64(seed));
    let out = video_encoder_forward(&clip, &model, seed).unwrap();
    let (z, tokens) = super::dense_video_encoder(&clip, &model);
    let dz = out.z_v.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    dz.max(max_abs(&out.tokens.embeddings, &tokens))
}

/// The encoder with dense attention, and with a single block spanning all
/// tokens and unit keep rates at two pruning sites, against the reference.
pub fn pipeline_matches_reference() -> Outcome {
    let dense = pipeline_error(pipeline_config(SparsityConfig::Dense, PruneSchedule::none()), 1);
    let prune = PruneSchedule {
        visual_layers: vec![1, 3],
        visual_keep_rates: vec![1.0, 1.0],
        ..PruneSchedule::none()
    };
    // 18 regional tokens fit in one block of 64
    let complete = pipeline_error(pipeline_config(SparsityConfig::block(1, 0, 64), prune), 2);
    let worst = dense.max(complete);
    ensure(worst <= 1e-5, || format!("dense {dense:.2e}, complete graph {complete:.2e}"))?;
    Ok(format!("end-to-end max |err| {worst:.1e}"))
}

fn enumerate(edges: &EdgeSet) -> u64 {
    let n = edges.seq_len();
    let mut count = 0;
    for q in 0..n {
        for k in 0..n {
            count += edges.contains(q, k) as u64;
        }
    }
    count
}

/// `count_edges` against pair enumeration on random configurations with N ≤ 2000.
pub fn closed_form_edges(cases: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..cases {
        let n = rng.gen_range(1..=2000);
        let g = rng.gen_range(1..=96);
        let kl = 2 * rng.gen_range(0..4) + 1;
        let kr = rng.gen_range(0..6);
        let global = rng.gen_bool(0.8);
        let edges = EdgeSet::seeded(chunk_blocks(n, g).unwrap(), kl, kr, global, rng.gen()).unwrap();
        edges.validate().map_err(|e| e.to_string())?;
        let brute = enumerate(&edges);
        let formula = count_edges(&edges);
        ensure(formula == brute, || format!("case {case} n={n} g={g} kl={kl} kr={kr}: {formula} vs {brute}"))?;
        if global {
            let nnz = KeyLists::from_edge_set(&edges).nnz() as u64;
            ensure(nnz == brute, || format!("case {case}: key lists hold {nnz}, enumeration {brute}"))?;
        }
    }
    Ok(format!("{cases} configurations exact"))
}

/// Per-layer counts of the exact cost profile against enumerating each
/// layer's sampled graph.
pub fn exact_profile_edges(cases: usize) -> Outcome {
    let dims = CostDims {
        visual_depth: 5,
        multimodal_depth: 2,
        tokens_per_frame: 12,
        text_len: 6,
        dim: 8,
        heads: 2,
        prune_layers: vec![2, 4],
        ..CostDims::full_size()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..cases {
        let frames = rng.gen_range(1..6);
        let g = rng.gen_range(1..10);
        let kr = rng.gen_range(0..4);
        let cfg = CostConfig::with_rates(frames, SparsityConfig::block(1, kr, g), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), &dims);
        let seed = rng.gen();
        let p = edge_profile(&cfg, &dims, EdgeMode::Exact { seed }).map_err(|e| e.to_string())?;
        for (l, (&tokens, &e)) in p.visual_tokens.iter().zip(&p.visual_edges).enumerate() {
            let edges = EdgeSet::seeded(chunk_blocks(tokens - 1, g).unwrap(), 1, kr, true, derive_seed(seed, &[l as u64 + 1])).unwrap();
            let brute = enumerate(&edges);
            ensure(e == brute, || format!("layer {}: {e} vs {brute}", l + 1))?;
        }
        for (&keys, &e) in p.multimodal_keys.iter().zip(&p.multimodal_edges) {
            ensure(e == (keys * dims.text_len) as u64, || format!("multimodal layer: {e} edges for {keys} keys"))?;
        }
        ensure(p.total == p.visual_edges.iter().chain(&p.multimodal_edges).sum::<u64>(), || "total".into())?;
    }
    Ok(format!("{cases} profiles exact"))
}

type Build = dyn Fn(&mut Tape<'_>, &[NodeId]) -> NodeId;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    random_mat(rng, r, c)
}

/// Reduces the op output to a scalar with fixed random weights, then compares
/// the analytic gradient of every input element with central differences.
/// Returns the number of elements checked.
fn check(name: &str, inputs: Vec<Tensor>, build: &Build, rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("x{i}"), t).unwrap())
        .collect();
    let out_shape = {
        let mut tape = Tape::new(&store);
        let nodes: Vec<_> = ids.iter().map(|&id| tape.param(id)).collect();
        let out = build(&mut tape, &nodes);
        tape.value(out).dim()
    };
    let weights = rand_t(rng, out_shape.0, out_shape.1);
    let loss = |store: &ParamStore| -> (f64, Option<Gradients>) {
        let mut tape = Tape::new(store);
        let nodes: Vec<_> = ids.iter().map(|&id| tape.param(id)).collect();
        let out = build(&mut tape, &nodes);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let l = tape.sum(prod);
        (tape.scalar(l), tape.backward(l).ok())
    };
    let grads = loss(&store).1.ok_or_else(|| format!("{name}: backward failed"))?;
    let mut count = 0;
    for (slot, &id) in ids.iter().enumerate() {
        let (r, c) = store.value(id).dim();
        for i in 0..r {
            for j in 0..c {
                let a = grads.get(id).map_or(0.0, |g| g[[i, j]]);
                let n = finite_difference(&mut store, id, (i, j), 1e-6, |s| Ok(loss(s).0)).map_err(|e| e.to_string())?;
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
                ensure(err < 1e-4, || format!("{name}: d/dx{slot}[{i},{j}] analytic {a} numeric {n}"))?;
                count += 1;
            }
        }
    }
    Ok(count)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

pub const PRIMITIVE_GROUPS: [&str; 6] = ["matmul", "elementwise", "normalization", "row_selection", "losses", "attention"];

/// Finite-difference checks of one group of tape primitives over five random draws.
pub fn primitive_gradients(group: &str) -> Outcome {
    let seed = PRIMITIVE_GROUPS.iter().position(|g| *g == group).ok_or_else(|| format!("unknown group {group}"))? as u64 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = 0;
    for _ in 0..5 {
        n += primitive_trial(group, &mut rng)?;
    }
    Ok(format!("{group}: {n} elements"))
}

fn primitive_trial(group: &str, rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut n = 0;
    match group {
        "matmul" => {
            let (m, k) = dims(rng);
            let p = rng.gen_range(1..5);
            n += check("matmul", vec![rand_t(rng, m, k), rand_t(rng, k, p)], &|t, x| t.matmul(x[0], x[1]).unwrap(), rng)?;
            n += check("matmul_t", vec![rand_t(rng, m, k), rand_t(rng, p, k)], &|t, x| t.matmul_t(x[0], x[1]).unwrap(), rng)?;
        }
        "elementwise" => {
            let (r, c) = dims(rng);
            let pair = vec![rand_t(rng, r, c), rand_t(rng, r, c)];
            n += check("add", pair.clone(), &|t, x| t.add(x[0], x[1]).unwrap(), rng)?;
            n += check("mul", pair, &|t, x| t.mul(x[0], x[1]).unwrap(), rng)?;
            n += check("add_row", vec![rand_t(rng, r, c), rand_t(rng, 1, c)], &|t, x| t.add_row(x[0], x[1]).unwrap(), rng)?;
            n += check("mul_scalar", vec![rand_t(rng, r, c), rand_t(rng, 1, 1)], &|t, x| t.mul_scalar(x[0], x[1]).unwrap(), rng)?;
            let s = rng.gen_range(-3.0..3.0);
            n += check("scale", vec![rand_t(rng, r, c)], &move |t, x| t.scale(x[0], s), rng)?;
            n += check("exp", vec![rand_t(rng, r, c)], &|t, x| t.exp(x[0]), rng)?;
            let wide = rand_t(rng, r, c) * 3.0;
            n += check("gelu", vec![wide], &|t, x| t.gelu(x[0]), rng)?;
            n += check("transpose", vec![rand_t(rng, r, c)], &|t, x| t.transpose(x[0]), rng)?;
            n += check("sum", vec![rand_t(rng, r, c)], &|t, x| t.sum(x[0]), rng)?;
        }
        "normalization" => {
            let r = rng.gen_range(1..4);
            let c = rng.gen_range(2..7);
            let ln = vec![rand_t(rng, r, c), rand_t(rng, 1, c), rand_t(rng, 1, c)];
            n += check("layer_norm", ln, &|t, x| t.layer_norm(x[0], x[1], x[2]).unwrap(), rng)?;
            let p = rng.gen_range(1..4);
            let lin = vec![rand_t(rng, r, c), rand_t(rng, c, p), rand_t(rng, 1, p)];
            n += check("linear", lin, &|t, x| t.linear(x[0], x[1], x[2]).unwrap(), rng)?;
            n += check("l2_normalize_rows", vec![rand_t(rng, r, c)], &|t, x| t.l2_normalize_rows(x[0]), rng)?;
        }
        "row_selection" => {
            let (r, c) = dims(rng);
            let rows: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..r)).collect();
            n += check("gather_rows", vec![rand_t(rng, r, c)], &move |t, x| t.gather_rows(x[0], rows.clone()).unwrap(), rng)?;
            let r2 = rng.gen_range(1..4);
            let cat = vec![rand_t(rng, r, c), rand_t(rng, r2, c)];
            n += check("concat_rows", cat, &|t, x| t.concat_rows(&[x[0], x[1], x[0]]).unwrap(), rng)?;
        }
        "losses" => {
            let (r, c) = dims(rng);
            let c = c + 1;
            let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            let logits = rand_t(rng, r, c) * 2.0;
            n += check("cross_entropy", vec![logits], &move |t, x| t.cross_entropy(x[0], targets.clone()).unwrap(), rng)?;
            let labels = Array2::from_shape_fn((r, 1), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            let logits = rand_t(rng, r, 1) * 3.0;
            n += check("bce_with_logits", vec![logits], &move |t, x| t.bce_with_logits(x[0], labels.clone()).unwrap(), rng)?;
        }
        "attention" => {
            let heads = rng.gen_range(1..3);
            let d = heads * rng.gen_range(1..4);
            let nq = rng.gen_range(1..5);
            let nk = rng.gen_range(1..6);
            let rows: Vec<Vec<usize>> = (0..nq)
                .map(|_| {
                    let mut r: Vec<usize> = (0..nk).filter(|_| rng.gen_bool(0.6)).collect();
                    if r.is_empty() {
                        r.push(rng.gen_range(0..nk));
                    }
                    r
                })
                .collect();
            let keys = Arc::new(KeyLists::from_rows(rows, nk).unwrap());
            let table_len = 5;
            let idx: Arc<Vec<Option<usize>>> = Arc::new((0..keys.nnz()).map(|_| rng.gen_bool(0.7).then(|| rng.gen_range(0..table_len))).collect());
            let inputs = vec![rand_t(rng, nq, d), rand_t(rng, nk, d), rand_t(rng, nk, d), rand_t(rng, heads, table_len)];
            let k2 = keys.clone();
            n += check(
                "attention",
                inputs.clone(),
                &move |t, x| t.attention(x[0], x[1], x[2], heads, k2.clone(), Some((x[3], idx.clone()))).unwrap(),
                rng,
            )?;
            n += check(
                "attention (no bias)",
                inputs[..3].to_vec(),
                &move |t, x| t.attention(x[0], x[1], x[2], heads, keys.clone(), None).unwrap(),
                rng,
            )?;
        }
        other => return Err(format!("unknown group {other}")),
    }
    Ok(n)
}

fn loss_model() -> ModelConfig {
    ModelConfig {
        frames: 2,
        frame_height: 16,
        frame_width: 16,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        visual_depth: 3,
        text_depth: 2,
        multimodal_depth: 1,
        text_len: 6,
        sparsity: SparsityConfig::block(1, 1, 2),
        prune: PruneSchedule::uniform(&[2], 0.7, 0.5),
        ..ModelConfig::default()
    }
}

/// Central differences of the summed contrastive, matching and masked-LM loss
/// for one batch, at three entries of parameters spread over every tower.
pub fn full_loss_gradient() -> Outcome {
    let spec = CorpusSpec {
        n_clips: 6,
        frames: 4,
        size: 16,
        n_eval: 0,
        sprite: 6,
    };
    let corpus = Corpus::in_memory(&spec, 9).map_err(|e| e.to_string())?;
    let mut model = Model::init(loss_model(), 4).unwrap();
    // move away from the symmetric init so every path carries gradient
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for (k, &id) in ids.iter().enumerate() {
        model
            .params
            .value_mut(id)
            .indexed_iter_mut()
            .for_each(|((r, c), x)| *x += 0.05 * (((k * 31 + r * 7 + c * 3) % 11) as f64 - 5.0) / 5.0);
    }
    let batch = [0, 1, 2, 3];
    let loss = |m: &Model| {
        let r = step_gradients(m, &corpus, &batch, 11, 0, 0, 0.5, Execution::Sequential)?;
        Ok(r.vtc + r.vtm + r.mlm)
    };
    let analytic = step_gradients(&model, &corpus, &batch, 11, 0, 0, 0.5, Execution::Sequential).map_err(|e| e.to_string())?;
    let names = [
        "vis.patch.w",
        "vis.pos",
        "vis.blk1.attn.q.w",
        "vis.blk1.rel",
        "vis.blk3.mlp.fc1.w",
        "vis.proj.w",
        "txt.tok",
        "txt.blk1.ln1.g",
        "mm.blk1.xattn.k.w",
        "mm.blk1.attn.v.b",
        "vtm.head.w",
        "mlm.head.w",
        "log_tau",
    ];
    let mut worst = 0.0f64;
    for name in names {
        let id = model.params.id(name).map_err(|e| e.to_string())?;
        let (r, c) = model.params.value(id).dim();
        for (i, j) in [(0, 0), (r / 2, c / 2), (r - 1, c - 1)] {
            let a = analytic.grads.get(id).map_or(0.0, |g| g[[i, j]]);
            let config = model.config.clone();
            let mut params = model.params.clone();
            let n = finite_difference(&mut params, id, (i, j), 1e-5, |p| loss(&Model::from_parts(config.clone(), p.clone()).unwrap()))
                .map_err(|e| e.to_string())?;
            let err = (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
            ensure(err < 1e-4 || (a - n).abs() < 1e-8, || format!("{name}[{i},{j}]: analytic {a} numeric {n}"))?;
            worst = worst.max((a - n).abs());
        }
    }
    Ok(format!("{} entries, max |analytic - numeric| {worst:.1e}", names.len() * 3))
}
