//! Synthetic corpus, frame sampling, staged training, retrieval evaluation,
//! the shuffled-frame probe and keep-mask export.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{round_to_f32, Checkpoint, StageMeta};
use crate::costmodel::default_prune_layers;
use crate::curriculum::{expand_checkpoint, validate_schedule, ExpansionSchedule, Stage};
use crate::encoder::{
    fusion_pass, mlm_logits, patchify, text_pass, visual_pass, vtm_logit, Clip, Model, ModelConfig,
    FIRST_WORD_ID,
};
use crate::error::{invalid, Error, Result};
use crate::gradengine::{AdamW, AdamWConfig, Gradients, NodeId, Tape, Tensor};
use crate::objectives::{clamp_log_tau, vtc_on_tape, MaskPlan, MASK_PROB};
use crate::parallel::Execution;
use crate::pruning::{write_keep_masks, KeepMask};
use crate::seed::{derive_seed, rng_for};

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [230, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 80, 240]),
    ("yellow", [240, 220, 40]),
    ("cyan", [40, 220, 230]),
    ("magenta", [220, 50, 220]),
    ("white", [245, 245, 245]),
    ("orange", [250, 140, 20]),
];
pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "cross"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

pub const MOTION_WORDS: [&str; 5] = ["moves", "left", "right", "up", "down"];

/// Caption vocabulary in id order, starting at [`FIRST_WORD_ID`].
pub fn vocabulary() -> Vec<String> {
    let mut v = vec!["the".to_string()];
    v.extend(COLORS.iter().map(|(c, _)| c.to_string()));
    v.extend(SHAPES.iter().map(|s| s.to_string()));
    v.extend(MOTION_WORDS.iter().map(|s| s.to_string()));
    v
}

pub fn encode_caption(caption: &str) -> Result<Vec<usize>> {
    let vocab = vocabulary();
    caption
        .split_whitespace()
        .map(|w| {
            vocab
                .iter()
                .position(|v| v == w)
                .map(|i| i + FIRST_WORD_ID)
                .ok_or_else(|| Error::InvalidArgument(format!("word '{w}' not in vocabulary")))
        })
        .collect()
}

/// Labels of one synthetic clip; the caption is a function of these alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipLabels {
    pub color: usize,
    pub shape: usize,
    pub motion: Option<Direction>,
    /// Top-left sprite corner in the first frame.
    pub start: (usize, usize),
}

impl ClipLabels {
    pub fn caption(&self) -> String {
        let mut c = format!("the {} {}", COLORS[self.color].0, SHAPES[self.shape]);
        if let Some(d) = self.motion {
            c.push_str(" moves ");
            c.push_str(d.word());
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub file: String,
    pub split: Split,
    pub labels: ClipLabels,
    pub caption: String,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_clips: usize,
    /// Frames stored per clip.
    pub frames: usize,
    pub size: usize,
    pub n_eval: usize,
    pub sprite: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_clips: 512,
            frames: 16,
            size: 32,
            n_eval: 128,
            sprite: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: CorpusSpec,
    pub vocabulary: Vec<String>,
    pub clips: Vec<ClipRecord>,
}

fn inside(shape: usize, x: usize, y: usize, s: usize) -> bool {
    let (fx, fy, fs) = (x as f64 + 0.5, y as f64 + 0.5, s as f64);
    match SHAPES[shape] {
        "square" => true,
        "circle" => {
            let c = fs / 2.0;
            (fx - c).powi(2) + (fy - c).powi(2) <= c * c
        }
        "triangle" => (fx - fs / 2.0).abs() <= fy / 2.0,
        _ => {
            let third = s / 3;
            (third..s - third).contains(&x) || (third..s - third).contains(&y)
        }
    }
}

/// Sprite corner at frame `f` of `n`: static clips stay put, moving clips
/// sweep across the whole frame.
pub fn sprite_position(labels: &ClipLabels, f: usize, n: usize, size: usize, sprite: usize) -> (usize, usize) {
    let span = size - sprite;
    let at = |k: usize| if n > 1 { (k * span + (n - 1) / 2) / (n - 1) } else { span / 2 };
    let (x, y) = labels.start;
    match labels.motion {
        None => (x, y),
        Some(Direction::Right) => (at(f), y),
        Some(Direction::Left) => (span - at(f), y),
        Some(Direction::Down) => (x, at(f)),
        Some(Direction::Up) => (x, span - at(f)),
    }
}

/// Renders `F` frames as `F × size × size × 3` bytes.
pub fn render_clip(labels: &ClipLabels, spec: &CorpusSpec) -> Array4<u8> {
    let mut out = Array4::from_elem((spec.frames, spec.size, spec.size, 3), 16u8);
    let color = COLORS[labels.color].1;
    for f in 0..spec.frames {
        let (x0, y0) = sprite_position(labels, f, spec.frames, spec.size, spec.sprite);
        for y in 0..spec.sprite {
            for x in 0..spec.sprite {
                if inside(labels.shape, x, y, spec.sprite) {
                    for c in 0..3 {
                        out[[f, y0 + y, x0 + x, c]] = color[c];
                    }
                }
            }
        }
    }
    out
}

fn filmstrip(frames: &Array4<u8>) -> RgbImage {
    let (f, h, w, _) = frames.dim();
    ImageBuffer::from_fn((w * f) as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let (k, xx) = (x / w, x % w);
        Rgb([frames[[k, y, xx, 0]], frames[[k, y, xx, 1]], frames[[k, y, xx, 2]]])
    })
}

fn read_filmstrip(path: &Path, spec: &CorpusSpec) -> Result<Array4<u8>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    if (w as usize, h as usize) != (spec.size * spec.frames, spec.size) {
        return Err(Error::Format(format!("{} is {w}x{h}", path.display())));
    }
    Ok(Array4::from_shape_fn((spec.frames, spec.size, spec.size, 3), |(f, y, x, c)| {
        img.get_pixel((f * spec.size + x) as u32, y as u32)[c]
    }))
}

/// Writes `clip_NNNN.png` filmstrips and `manifest.json` into `dir`.
pub fn generate_corpus(dir: &Path, spec: &CorpusSpec, seed: u64) -> Result<Manifest> {
    if spec.n_clips == 0 || spec.frames == 0 {
        return invalid("corpus needs at least one clip and one frame");
    }
    if spec.sprite == 0 || spec.sprite > spec.size || spec.n_eval > spec.n_clips {
        return invalid("sprite must fit the frame and n_eval must not exceed n_clips");
    }
    fs::create_dir_all(dir)?;
    let mut rng = rng_for(seed, &[0xC0]);
    let span = spec.size - spec.sprite;
    let mut clips = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let labels = ClipLabels {
            color: rng.gen_range(0..COLORS.len()),
            shape: rng.gen_range(0..SHAPES.len()),
            // every other clip moves, so exactly half the captions carry motion words
            motion: (i % 2 == 1).then(|| Direction::ALL[rng.gen_range(0..4)]),
            start: (rng.gen_range(0..=span), rng.gen_range(0..=span)),
        };
        let file = format!("clip_{i:04}.png");
        filmstrip(&render_clip(&labels, spec)).save(dir.join(&file))?;
        let caption = labels.caption();
        clips.push(ClipRecord {
            tokens: encode_caption(&caption)?,
            caption,
            file,
            split: if i >= spec.n_clips - spec.n_eval { Split::Eval } else { Split::Train },
            labels,
        });
    }
    let manifest = Manifest {
        seed,
        spec: spec.clone(),
        vocabulary: vocabulary(),
        clips,
    };
    let f = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(manifest)
}

/// A loaded corpus: manifest plus every clip's frames.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: Manifest,
    pub frames: Vec<Array4<u8>>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_reader(fs::File::open(dir.join("manifest.json"))?)?;
        let frames = manifest
            .clips
            .iter()
            .map(|c| read_filmstrip(&dir.join(&c.file), &manifest.spec))
            .collect::<Result<_>>()?;
        Ok(Corpus { manifest, frames })
    }

    /// Renders the corpus in memory without touching the filesystem.
    pub fn in_memory(spec: &CorpusSpec, seed: u64) -> Result<Self> {
        let dir = std::env::temp_dir().join(format!("svitt-corpus-{}-{seed}", std::process::id()));
        let manifest = generate_corpus(&dir, spec, seed)?;
        let frames = manifest.clips.iter().map(|c| render_clip(&c.labels, spec)).collect();
        let _ = fs::remove_dir_all(&dir);
        Ok(Corpus { manifest, frames })
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.clips.len())
            .filter(|&i| self.manifest.clips[i].split == split)
            .collect()
    }

    pub fn tokens(&self, i: usize) -> &[usize] {
        &self.manifest.clips[i].tokens
    }

    /// Selected frames of clip `i` as floats in `[0, 1]`.
    pub fn clip(&self, i: usize, indices: &[usize]) -> Clip {
        self.frames[i]
            .select(Axis(0), indices)
            .mapv(|b| b as f64 / 255.0)
    }
}

/// One frame index drawn uniformly from each of `t` contiguous chunks of `f` frames.
pub fn sample_frames<R: Rng + ?Sized>(f: usize, t: usize, rng: &mut R) -> Result<Vec<usize>> {
    if t == 0 || f < t {
        return invalid(format!("cannot sample {t} frames from {f}"));
    }
    Ok((0..t)
        .map(|c| rng.gen_range(c * f / t..(c + 1) * f / t))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_vtc: f64,
    pub loss_vtm: f64,
    pub loss_mlm: f64,
    pub lr: f64,
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("metrics csv: {e}"))
}

/// Knobs of a training run that are not part of the stage itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub seed: u64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub mask_prob: f64,
    /// Stop after this many steps of the stage (the schedule still spans all epochs).
    pub max_steps: Option<u64>,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 0,
            warmup_fraction: 0.1,
            weight_decay: 0.02,
            mask_prob: MASK_PROB,
            max_steps: None,
            execution: Execution::default(),
        }
    }
}

/// Linear warm-up then cosine decay to zero over `total` steps.
pub fn lr_at(step: u64, total: u64, peak: f64, warmup_fraction: f64) -> f64 {
    let warm = ((total as f64 * warmup_fraction).ceil() as u64).min(total);
    if step < warm {
        return peak * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let p = ((step - warm) as f64 / span).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

pub fn steps_per_epoch(n_train: usize, batch: usize) -> usize {
    (n_train / batch.min(n_train).max(1)).max(1)
}

struct ExampleTape<'p> {
    tape: Tape<'p>,
    z_v: NodeId,
    z_t: NodeId,
    local: NodeId,
    vtm: f64,
    mlm: f64,
}

struct StepInputs {
    clips: Vec<Array2<f64>>,
    texts: Vec<Vec<usize>>,
    negatives: Vec<usize>,
    masked: Vec<Vec<usize>>,
    mask_rows: Vec<Vec<usize>>,
    mask_targets: Vec<Vec<usize>>,
    edge_seeds: Vec<u64>,
}

fn example_forward<'p>(model: &'p Model, inp: &StepInputs, i: usize, scale: f64) -> Result<ExampleTape<'p>> {
    let cfg = &model.config;
    let mut tape = Tape::new(&model.params);
    let vis = visual_pass(&mut tape, cfg, &inp.clips[i], inp.edge_seeds[i])?;
    let txt = text_pass(&mut tape, cfg, &inp.texts[i])?;
    let pos = fusion_pass(&mut tape, cfg, txt.hidden, vis.tokens, &cfg.prune)?;
    let pos_logit = vtm_logit(&mut tape, pos.fused)?;
    let neg_txt = text_pass(&mut tape, cfg, &inp.texts[inp.negatives[i]])?;
    let neg = fusion_pass(&mut tape, cfg, neg_txt.hidden, vis.tokens, &cfg.prune)?;
    let neg_logit = vtm_logit(&mut tape, neg.fused)?;
    let logits = tape.concat_rows(&[pos_logit, neg_logit])?;
    let vtm = tape.bce_with_logits(logits, ndarray::array![[1.0], [0.0]])?;
    let vtm_value = tape.scalar(vtm);
    let mut local = vtm;
    let mut mlm_value = 0.0;
    if !inp.mask_rows[i].is_empty() {
        let m_txt = text_pass(&mut tape, cfg, &inp.masked[i])?;
        let m = fusion_pass(&mut tape, cfg, m_txt.hidden, vis.tokens, &cfg.prune)?;
        let logits = mlm_logits(&mut tape, m.fused, inp.mask_rows[i].clone())?;
        let mlm = tape.cross_entropy(logits, inp.mask_targets[i].clone())?;
        mlm_value = tape.scalar(mlm);
        local = tape.add(local, mlm)?;
    }
    let local = tape.scale(local, scale);
    Ok(ExampleTape {
        z_v: vis.z,
        z_t: txt.z,
        local,
        tape,
        vtm: vtm_value,
        mlm: mlm_value,
    })
}

/// Losses (per-example means) and gradients of one batch.
pub struct StepResult {
    pub vtc: f64,
    pub vtm: f64,
    pub mlm: f64,
    pub grads: Gradients,
}

fn batch_step(model: &Model, inp: &StepInputs, exec: Execution) -> Result<StepResult> {
    let b = inp.clips.len();
    let scale = 1.0 / b as f64;
    let tapes = exec.try_map(b, |i| example_forward(model, inp, i, scale))?;
    let d = model.config.dim;
    let stack = |f: &dyn Fn(&ExampleTape) -> NodeId| -> Tensor {
        let mut z = Array2::zeros((b, d));
        for (i, t) in tapes.iter().enumerate() {
            z.row_mut(i).assign(&t.tape.value(f(t)).row(0));
        }
        z
    };
    let zv = stack(&|t| t.z_v);
    let zt = stack(&|t| t.z_t);
    let mut head = Tape::new(&model.params);
    let zv_n = head.constant(zv);
    let zt_n = head.constant(zt);
    let log_tau = head.param_by_name("log_tau")?;
    let vtc = vtc_on_tape(&mut head, zv_n, zt_n, log_tau)?;
    let vtc_value = head.scalar(vtc);
    let vtc = head.scale(vtc, scale);
    if !vtc_value.is_finite() {
        return Err(Error::Numerical(format!("contrastive loss is {vtc_value}")));
    }
    let (head_grads, captured) = head.backward_capture(vec![(vtc, Array2::ones((1, 1)))], &[zv_n, zt_n])?;
    let parts = exec.try_map(b, |i| {
        let t = &tapes[i];
        let seeds = vec![
            (t.local, Array2::ones((1, 1))),
            (t.z_v, captured[0].row(i).insert_axis(Axis(0)).to_owned()),
            (t.z_t, captured[1].row(i).insert_axis(Axis(0)).to_owned()),
        ];
        t.tape.backward_seeded(seeds)
    })?;
    let mut grads = head_grads;
    for p in &parts {
        grads.add_assign(p);
    }
    let vtm: f64 = tapes.iter().map(|t| t.vtm).sum();
    let mlm: f64 = tapes.iter().map(|t| t.mlm).sum();
    Ok(StepResult {
        vtc: vtc_value * scale,
        vtm: vtm * scale,
        mlm: mlm * scale,
        grads,
    })
}

/// Losses and gradients for the batch of clips `batch` at `(stage, step)`,
/// with every random draw derived from `seed`.
pub fn step_gradients(model: &Model, corpus: &Corpus, batch: &[usize], seed: u64, stage: usize, step: u64, mask_prob: f64, exec: Execution) -> Result<StepResult> {
    let inputs = prepare_step(model, corpus, batch, seed, stage, step, mask_prob)?;
    batch_step(model, &inputs, exec)
}

fn prepare_step(model: &Model, corpus: &Corpus, batch: &[usize], seed: u64, stage: usize, step: u64, mask_prob: f64) -> Result<StepInputs> {
    let cfg = &model.config;
    let f = corpus.manifest.spec.frames;
    let b = batch.len();
    let path = |tag: u64, i: usize| [stage as u64, step, tag, i as u64];
    let mut clips = Vec::with_capacity(b);
    let mut edge_seeds = Vec::with_capacity(b);
    for (i, &c) in batch.iter().enumerate() {
        let idx = sample_frames(f, cfg.frames, &mut rng_for(seed, &path(1, i)))?;
        clips.push(patchify(&corpus.clip(c, &idx), cfg.patch)?);
        edge_seeds.push(derive_seed(seed, &path(2, i)));
    }
    let texts: Vec<Vec<usize>> = batch.iter().map(|&c| corpus.tokens(c).to_vec()).collect();
    let mut neg_rng = rng_for(seed, &path(3, 0));
    let negatives = (0..b)
        .map(|i| {
            if b == 1 {
                return i;
            }
            let j = neg_rng.gen_range(0..b - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect();
    let plan = MaskPlan::sample(&texts, mask_prob, &mut rng_for(seed, &path(4, 0)))?;
    let masked = (0..b).map(|i| plan.apply(i, &texts[i])).collect();
    let mask_rows = plan.positions.iter().map(|p| p.iter().map(|x| x + 1).collect()).collect();
    Ok(StepInputs {
        clips,
        texts,
        negatives,
        masked,
        mask_rows,
        mask_targets: plan.targets,
        edge_seeds,
    })
}

fn optimizer_for(model: &Model, weight_decay: f64) -> AdamW {
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    );
    opt.no_decay = model.decay_mask().iter().map(|d| !d).collect();
    opt
}

pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
}

/// Runs the optimizer over the training split for the stage's epochs,
/// resuming from `checkpoint.meta.step` when optimizer state is present.
///
/// On a non-finite loss or gradient the last good checkpoint is written to
/// `last_good` (when given) and a numerical error is returned.
pub fn train_stage(mut checkpoint: Checkpoint, stage: &Stage, corpus: &Corpus, opts: &TrainOptions, last_good: Option<&Path>) -> Result<StageOutcome> {
    stage.validate()?;
    if checkpoint.model.config.frames != stage.frames {
        return invalid(format!(
            "checkpoint has {} frames, stage wants {}",
            checkpoint.model.config.frames, stage.frames
        ));
    }
    let train = corpus.split(Split::Train);
    if train.is_empty() {
        return invalid("training split is empty");
    }
    let batch = stage.batch.min(train.len());
    let per_epoch = steps_per_epoch(train.len(), batch) as u64;
    let total = per_epoch * stage.epochs as u64;
    let stop = opts.max_steps.map_or(total, |m| m.min(total));
    let stage_idx = checkpoint.meta.stage;
    let mut opt = match checkpoint.optimizer.take() {
        Some(o) if checkpoint.meta.step > 0 => o,
        _ => {
            checkpoint.meta.step = 0;
            optimizer_for(&checkpoint.model, opts.weight_decay)
        }
    };
    let mut metrics = Vec::new();
    let log_tau = checkpoint.model.params.id("log_tau")?;
    while checkpoint.meta.step < stop {
        let step = checkpoint.meta.step;
        let epoch = step / per_epoch;
        let mut order = train.clone();
        order.shuffle(&mut rng_for(opts.seed, &[stage_idx as u64, 0xE0, epoch]));
        let k = (step % per_epoch) as usize;
        let ids = &order[k * batch..(k + 1) * batch];
        let lr = lr_at(step, total, stage.lr, opts.warmup_fraction);
        let result = step_gradients(&checkpoint.model, corpus, ids, opts.seed, stage_idx, step, opts.mask_prob, opts.execution).and_then(|r| {
            let total_loss = r.vtc + r.vtm + r.mlm;
            if !total_loss.is_finite() || !r.grads.all_finite() {
                return Err(Error::Numerical(format!("non-finite loss or gradient at step {step}")));
            }
            Ok(r)
        });
        let r = match result {
            Ok(r) => r,
            Err(e @ Error::Numerical(_)) => {
                if let Some(path) = last_good {
                    checkpoint.optimizer = Some(opt);
                    checkpoint.save(path)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        opt.step(&mut checkpoint.model.params, &r.grads, lr)?;
        let lt = checkpoint.model.params.value_mut(log_tau);
        lt[[0, 0]] = clamp_log_tau(lt[[0, 0]]);
        metrics.push(MetricRow {
            step,
            loss_total: r.vtc + r.vtm + r.mlm,
            loss_vtc: r.vtc,
            loss_vtm: r.vtm,
            loss_mlm: r.mlm,
            lr,
        });
        checkpoint.meta.step += 1;
    }
    round_to_f32(&mut checkpoint.model.params);
    checkpoint.optimizer = Some(opt);
    Ok(StageOutcome { checkpoint, metrics })
}

/// Recall@{1,5,10} in percent and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean: f64,
    /// Rank (0 = top) of the paired video for each text query.
    pub ranks: Vec<usize>,
    /// Top candidates (up to 10) per text query.
    pub top: Vec<Vec<usize>>,
}

/// Ranks every candidate video per text query by similarity. The paired
/// video's rank counts strictly better candidates, plus equal-scoring ones
/// with a lower index.
pub fn retrieval_from_similarity(sim: &Array2<f64>) -> Result<RetrievalResult> {
    let n = sim.nrows();
    if n == 0 || sim.ncols() != n {
        return invalid("similarity matrix must be square and non-empty");
    }
    let mut ranks = Vec::with_capacity(n);
    let mut top = Vec::with_capacity(n);
    for i in 0..n {
        let row = sim.row(i);
        let own = row[i];
        let rank = (0..n).filter(|&j| row[j] > own || (row[j] == own && j < i)).count();
        ranks.push(rank);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(10);
        top.push(order);
    }
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    let (r1, r5, r10) = (recall(1), recall(5), recall(10));
    Ok(RetrievalResult {
        r1,
        r5,
        r10,
        mean: (r1 + r5 + r10) / 3.0,
        ranks,
        top,
    })
}

/// Deterministic evaluation frames for clip `i`.
pub fn eval_frames(corpus: &Corpus, i: usize, t: usize, seed: u64) -> Result<Vec<usize>> {
    sample_frames(corpus.manifest.spec.frames, t, &mut rng_for(seed, &[0xEA, i as u64]))
}

/// Joint-space embeddings of the given clips (videos) and their captions
/// (texts). `orders[k]`, when given, permutes clip `k`'s sampled frames.
pub fn embed_split(model: &Model, corpus: &Corpus, clips: &[usize], seed: u64, orders: Option<&[Vec<usize>]>, exec: Execution) -> Result<(Array2<f64>, Array2<f64>)> {
    let cfg = &model.config;
    if let Some(o) = orders {
        if o.len() != clips.len() {
            return invalid(format!("{} frame orders for {} clips", o.len(), clips.len()));
        }
    }
    let rows = exec.try_map(clips.len(), |k| -> Result<(Vec<f64>, Vec<f64>)> {
        let c = clips[k];
        let mut idx = eval_frames(corpus, c, cfg.frames, seed)?;
        if let Some(o) = orders {
            let mut sorted = o[k].clone();
            sorted.sort_unstable();
            if sorted != (0..idx.len()).collect::<Vec<_>>() {
                return invalid(format!("frame order for clip {c} is not a permutation"));
            }
            idx = o[k].iter().map(|&p| idx[p]).collect();
        }
        let patches = patchify(&corpus.clip(c, &idx), cfg.patch)?;
        let mut tape = Tape::new(&model.params);
        let v = visual_pass(&mut tape, cfg, &patches, derive_seed(seed, &[0xED, c as u64]))?;
        let t = text_pass(&mut tape, cfg, corpus.tokens(c))?;
        Ok((tape.value(v.z).row(0).to_vec(), tape.value(t.z).row(0).to_vec()))
    })?;
    let d = cfg.dim;
    let mut zv = Array2::zeros((clips.len(), d));
    let mut zt = Array2::zeros((clips.len(), d));
    for (i, (v, t)) in rows.into_iter().enumerate() {
        zv.row_mut(i).assign(&ndarray::Array1::from(v));
        zt.row_mut(i).assign(&ndarray::Array1::from(t));
    }
    Ok((zv, zt))
}

/// Text-to-video retrieval over the evaluation split.
pub fn evaluate_retrieval(model: &Model, corpus: &Corpus, seed: u64, exec: Execution) -> Result<RetrievalResult> {
    let clips = corpus.split(Split::Eval);
    if clips.is_empty() {
        return invalid("evaluation split is empty");
    }
    let (zv, zt) = embed_split(model, corpus, &clips, seed, None, exec)?;
    retrieval_from_similarity(&zt.dot(&zv.t()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub normal: RetrievalResult,
    pub shuffled: RetrievalResult,
    /// `normal.mean − shuffled.mean`.
    pub delta: f64,
    /// Mean recall over motion-caption queries only, normal and shuffled.
    pub motion_normal: f64,
    pub motion_shuffled: f64,
}

fn subset_mean(r: &RetrievalResult, queries: &[usize]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let recall = |k: usize| 100.0 * queries.iter().filter(|&&q| r.ranks[q] < k).count() as f64 / queries.len() as f64;
    (recall(1) + recall(5) + recall(10)) / 3.0
}

/// Random frame permutation for every evaluation clip.
pub fn probe_orders(corpus: &Corpus, frames: usize, seed: u64) -> Vec<Vec<usize>> {
    corpus
        .split(Split::Eval)
        .iter()
        .map(|&c| {
            let mut o: Vec<usize> = (0..frames).collect();
            o.shuffle(&mut rng_for(seed, &[0x5F, c as u64]));
            o
        })
        .collect()
}

/// Evaluates with sampled frames in order and again reordered by `orders`
/// (one permutation per evaluation clip).
pub fn probe_with_orders(model: &Model, corpus: &Corpus, seed: u64, orders: &[Vec<usize>], exec: Execution) -> Result<ProbeResult> {
    if model.config.frames < 2 {
        return invalid("the shuffled-frame probe needs at least two frames");
    }
    let clips = corpus.split(Split::Eval);
    if clips.is_empty() {
        return invalid("evaluation split is empty");
    }
    let (zv, zt) = embed_split(model, corpus, &clips, seed, None, exec)?;
    let normal = retrieval_from_similarity(&zt.dot(&zv.t()))?;
    let (zv_s, _) = embed_split(model, corpus, &clips, seed, Some(orders), exec)?;
    let shuffled = retrieval_from_similarity(&zt.dot(&zv_s.t()))?;
    let motion: Vec<usize> = clips
        .iter()
        .enumerate()
        .filter(|(_, &c)| corpus.manifest.clips[c].labels.motion.is_some())
        .map(|(q, _)| q)
        .collect();
    Ok(ProbeResult {
        delta: normal.mean - shuffled.mean,
        motion_normal: subset_mean(&normal, &motion),
        motion_shuffled: subset_mean(&shuffled, &motion),
        normal,
        shuffled,
    })
}

/// The shuffled-frame probe with a random permutation per clip.
pub fn temporal_probe(model: &Model, corpus: &Corpus, seed: u64, exec: Execution) -> Result<ProbeResult> {
    if model.config.frames < 2 {
        return invalid("the shuffled-frame probe needs at least two frames");
    }
    probe_with_orders(model, corpus, seed, &probe_orders(corpus, model.config.frames, seed), exec)
}

/// Which grid tokens survive each visual pruning site for one clip.
pub fn export_masks(model: &Model, clip: &Clip, edge_seed: u64) -> Result<Vec<KeepMask>> {
    let cfg = &model.config;
    if cfg.prune.visual_layers.is_empty() {
        return invalid("no visual pruning sites configured");
    }
    let patches = patchify(clip, cfg.patch)?;
    let mut tape = Tape::new(&model.params);
    let pass = visual_pass(&mut tape, cfg, &patches, edge_seed)?;
    let grid = cfg.grid();
    Ok(pass
        .decisions
        .iter()
        .map(|(layer, d, before)| {
            let mut alive = vec![false; grid.volume()];
            for &k in &d.kept_indices {
                alive[before[k]] = true;
            }
            KeepMask {
                layer: *layer,
                grid,
                alive,
            }
        })
        .collect())
}

pub fn write_masks_csv(path: &Path, masks: &[KeepMask]) -> Result<()> {
    write_keep_masks(BufWriter::new(fs::File::create(path)?), masks)
}

/// Model configuration for one stage on top of `base`, pruning at the
/// default sites for the visual depth.
pub fn stage_config(base: &ModelConfig, stage: &Stage) -> Result<ModelConfig> {
    stage.apply_to(base, &default_prune_layers(base.visual_depth))
}

/// Checkpoint ready to train `stage` (index `j`): a fresh model for the first
/// stage, otherwise `prev` expanded to the stage's clip length when needed and
/// reconfigured for its sparsity and pruning.
pub fn enter_stage(prev: Option<&Checkpoint>, base: &ModelConfig, stage: &Stage, j: usize, seed: u64) -> Result<Checkpoint> {
    match prev {
        None => {
            if j != 0 {
                return invalid(format!("stage {j} needs a checkpoint from the previous stage"));
            }
            let cfg = stage_config(base, stage)?;
            Ok(Checkpoint::new(
                Model::init(cfg, seed)?,
                StageMeta {
                    stage: 0,
                    frame_history: vec![stage.frames],
                    step: 0,
                    seed,
                },
            ))
        }
        Some(ck) => {
            let mut next = if ck.model.config.frames == stage.frames && ck.meta.stage == j {
                ck.clone()
            } else {
                expand_checkpoint(ck, stage.frames)?
            };
            if next.meta.stage != j {
                return invalid(format!("checkpoint is at stage {}, not {j}", next.meta.stage));
            }
            let base = ModelConfig {
                frames: stage.frames,
                ..ck.model.config.clone()
            };
            next.model = Model::from_parts(stage_config(&base, stage)?, next.model.params)?;
            Ok(next)
        }
    }
}

/// Per-stage artifacts of a curriculum run.
pub struct CurriculumRun {
    pub stages: Vec<StageOutcome>,
}

/// Trains every stage in order, expanding the checkpoint between stages.
/// Writes `stage{j}.ckpt` and `stage{j}_metrics.csv` into `out` when given.
pub fn run_curriculum(schedule: &ExpansionSchedule, base: &ModelConfig, corpus: &Corpus, opts: &TrainOptions, out: Option<&Path>) -> Result<CurriculumRun> {
    let report = validate_schedule(schedule)?;
    if !report.ok {
        let ids: Vec<String> = report.violations.iter().map(|v| v.constraint.to_string()).collect();
        return invalid(format!("schedule violates: {}", ids.join(", ")));
    }
    let mut stages: Vec<StageOutcome> = Vec::new();
    for (j, stage) in schedule.stages.iter().enumerate() {
        let ck = enter_stage(stages.last().map(|s| &s.checkpoint), base, stage, j, opts.seed)?;
        let last_good = out.map(|o| o.join(format!("stage{j}_last_good.ckpt")));
        let outcome = train_stage(ck, stage, corpus, opts, last_good.as_deref())?;
        if let Some(o) = out {
            let (ckpt, metrics) = stage_paths(o, j);
            outcome.checkpoint.save(&ckpt)?;
            write_metrics(&metrics, &outcome.metrics)?;
        }
        stages.push(outcome);
    }
    Ok(CurriculumRun { stages })
}

/// Everything a run needs besides the seed, as read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub schedule: ExpansionSchedule,
    pub train: TrainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            corpus: CorpusSpec::default(),
            schedule: desk_schedule(),
            train: TrainOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}

/// The hybrid 4 → 8 frame curriculum used at desk scale.
pub fn desk_schedule() -> ExpansionSchedule {
    let mut s1 = Stage::sparse(4, 0.7, 0.5, 1, 3, 8);
    s1.k_local = None;
    s1.k_random = None;
    s1.block_size = None;
    let mut s2 = Stage::sparse(8, 0.6, 0.5, 1, 3, 8);
    for (s, epochs) in [(&mut s1, 20), (&mut s2, 10)] {
        s.epochs = epochs;
        s.lr = 1e-4;
        s.batch = 32;
    }
    ExpansionSchedule { stages: vec![s1, s2] }
}

pub fn stage_paths(out: &Path, j: usize) -> (PathBuf, PathBuf) {
    (out.join(format!("stage{j}.ckpt")), out.join(format!("stage{j}_metrics.csv")))
}
