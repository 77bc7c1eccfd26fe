//! End-to-end behaviour of the corpus, training loop, evaluation and export.

use std::fs;
use std::path::Path;

use svitt::checkpoint::{round_to_f32, Checkpoint, StageMeta};
use svitt::curriculum::{ExpansionSchedule, Stage};
use svitt::encoder::{Model, ModelConfig};
use svitt::harness::*;
use svitt::pruning::{keep_count, PruneSchedule};
use svitt::{Error, Execution};

fn small_spec(n_clips: usize) -> CorpusSpec {
    CorpusSpec {
        n_clips,
        frames: 8,
        size: 16,
        n_eval: n_clips / 4,
        sprite: 5,
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        frames: 2,
        frame_height: 16,
        frame_width: 16,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        visual_depth: 3,
        text_depth: 2,
        multimodal_depth: 1,
        text_len: 8,
        ..ModelConfig::default()
    }
}

fn dense_stage(frames: usize, epochs: usize, lr: f64, batch: usize) -> Stage {
    Stage {
        frames,
        q_v: 1.0,
        q_m: 1.0,
        k_local: None,
        k_random: None,
        block_size: None,
        epochs,
        lr,
        batch,
    }
}

fn fresh(cfg: &ModelConfig, stage: &Stage, seed: u64) -> Checkpoint {
    enter_stage(None, cfg, stage, 0, seed).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn corpus_is_byte_identical_for_a_seed() {
    let spec = CorpusSpec {
        n_clips: 100,
        frames: 8,
        n_eval: 20,
        ..CorpusSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_corpus(a.path(), &spec, 11).unwrap();
    generate_corpus(b.path(), &spec, 11).unwrap();
    let fa = dir_bytes(a.path());
    assert_eq!(fa, dir_bytes(b.path()));
    assert_eq!(fa.iter().filter(|(n, _)| n.ends_with(".png")).count(), 100);
    assert!(fa.iter().any(|(n, _)| n == "manifest.json"));
    assert_eq!(fa.len(), 101);

    let c = tempfile::tempdir().unwrap();
    generate_corpus(c.path(), &spec, 12).unwrap();
    assert_ne!(fa, dir_bytes(c.path()));
}

#[test]
fn loaded_corpus_matches_in_memory() {
    let spec = small_spec(12);
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(dir.path(), &spec, 3).unwrap();
    let loaded = Corpus::load(dir.path()).unwrap();
    let memory = Corpus::in_memory(&spec, 3).unwrap();
    assert_eq!(loaded.manifest, memory.manifest);
    assert_eq!(loaded.frames, memory.frames);
}

#[test]
fn captions_follow_the_template() {
    let corpus = Corpus::in_memory(&small_spec(40), 5).unwrap();
    let vocab = vocabulary();
    assert!(vocab.len() <= 256);
    let mut moving = 0;
    for rec in &corpus.manifest.clips {
        let words: Vec<&str> = rec.caption.split(' ').collect();
        let has_motion = words.iter().any(|w| MOTION_WORDS.contains(w));
        assert_eq!(has_motion, rec.labels.motion.is_some(), "{}", rec.caption);
        assert_eq!(rec.caption, rec.labels.caption());
        assert_eq!(rec.tokens, encode_caption(&rec.caption).unwrap());
        moving += usize::from(has_motion);
    }
    assert_eq!(moving, 20);
    assert!(encode_caption("the purple square").is_err());
}

#[test]
fn static_clips_look_the_same_in_every_frame() {
    let spec = small_spec(8);
    let corpus = Corpus::in_memory(&spec, 9).unwrap();
    for (rec, frames) in corpus.manifest.clips.iter().zip(&corpus.frames) {
        let first = frames.index_axis(ndarray::Axis(0), 0);
        let last = frames.index_axis(ndarray::Axis(0), spec.frames - 1);
        assert_eq!(rec.labels.motion.is_none(), first == last);
    }
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let corpus = Corpus::in_memory(&small_spec(24), 1).unwrap();
    let cfg = small_model();
    let stage = dense_stage(2, 1, 0.0, 4);
    let start = fresh(&cfg, &stage, 4);
    let mut expected = start.model.params.clone();
    round_to_f32(&mut expected);
    let out = train_stage(start, &stage, &corpus, &TrainOptions::default(), None).unwrap();
    assert_eq!(out.checkpoint.model.params, expected);
    let steps = steps_per_epoch(corpus.split(Split::Train).len(), 4) as u64;
    assert_eq!(out.checkpoint.meta.step, steps);
    assert!(out.metrics.iter().all(|m| m.lr == 0.0));
}

#[test]
fn training_lowers_the_loss() {
    let corpus = Corpus::in_memory(&small_spec(64), 1).unwrap();
    let cfg = small_model();
    let stage = dense_stage(2, 40, 3e-3, 8);
    let opts = TrainOptions {
        max_steps: Some(200),
        ..TrainOptions::default()
    };
    let out = train_stage(fresh(&cfg, &stage, 1), &stage, &corpus, &opts, None).unwrap();
    assert_eq!(out.metrics.len(), 200);
    let mean = |rows: &[MetricRow]| rows.iter().map(|m| m.loss_total).sum::<f64>() / rows.len() as f64;
    let (head, tail) = (mean(&out.metrics[..20]), mean(&out.metrics[180..]));
    assert!(tail < 0.8 * head, "loss {head} -> {tail}");
    for m in &out.metrics {
        assert!((m.loss_total - (m.loss_vtc + m.loss_vtm + m.loss_mlm)).abs() < 1e-9);
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let corpus = Corpus::in_memory(&small_spec(32), 1).unwrap();
    let cfg = small_model();
    let stage = dense_stage(2, 2, 1e-3, 4);
    let opts = TrainOptions::default();
    let full = train_stage(fresh(&cfg, &stage, 2), &stage, &corpus, &opts, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.ckpt");
    let partial_opts = TrainOptions {
        max_steps: Some(3),
        ..opts.clone()
    };
    let first = train_stage(fresh(&cfg, &stage, 2), &stage, &corpus, &partial_opts, None).unwrap();
    assert_eq!(first.metrics.len(), 3);
    first.checkpoint.save(&path).unwrap();
    let rest = train_stage(Checkpoint::load(&path).unwrap(), &stage, &corpus, &opts, None).unwrap();

    let joined: Vec<MetricRow> = first.metrics.into_iter().chain(rest.metrics).collect();
    assert_eq!(joined.len(), full.metrics.len());
    for (a, b) in joined.iter().zip(&full.metrics) {
        assert_eq!(a.step, b.step);
        assert!((a.loss_total - b.loss_total).abs() < 1e-5, "step {}: {} vs {}", a.step, a.loss_total, b.loss_total);
    }
}

#[test]
fn curriculum_outputs_are_reproducible() {
    let corpus = Corpus::in_memory(&small_spec(24), 1).unwrap();
    let cfg = small_model();
    let schedule = ExpansionSchedule {
        stages: vec![
            Stage {
                q_v: 0.7,
                ..dense_stage(2, 1, 1e-3, 4)
            },
            Stage {
                k_local: Some(1),
                k_random: Some(1),
                block_size: Some(2),
                q_v: 0.6,
                ..dense_stage(4, 1, 1e-3, 4)
            },
        ],
    };
    let opts = TrainOptions {
        seed: 8,
        ..TrainOptions::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = run_curriculum(&schedule, &cfg, &corpus, &opts, Some(a.path())).unwrap();
    run_curriculum(&schedule, &cfg, &corpus, &opts, Some(b.path())).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let last = &run.stages[1].checkpoint;
    assert_eq!(last.meta.stage, 1);
    assert_eq!(last.meta.frame_history, vec![2, 4]);
    assert_eq!(last.model.config.frames, 4);
    let (_, metrics) = stage_paths(a.path(), 1);
    assert_eq!(read_metrics(&metrics).unwrap(), run.stages[1].metrics);
    let header = fs::read_to_string(&metrics).unwrap();
    assert!(header.starts_with("step,loss_total,loss_vtc,loss_vtm,loss_mlm,lr\n"));
}

#[test]
fn curriculum_rejects_a_bad_schedule() {
    let corpus = Corpus::in_memory(&small_spec(24), 1).unwrap();
    let schedule = ExpansionSchedule {
        stages: vec![dense_stage(4, 1, 1e-3, 4), dense_stage(2, 1, 1e-3, 4)],
    };
    let err = run_curriculum(&schedule, &small_model(), &corpus, &TrainOptions::default(), None);
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn exploding_updates_report_a_numerical_failure() {
    let corpus = Corpus::in_memory(&small_spec(24), 1).unwrap();
    let cfg = small_model();
    let stage = dense_stage(2, 50, 1e30, 4);
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.ckpt");
    let err = train_stage(fresh(&cfg, &stage, 1), &stage, &corpus, &TrainOptions::default(), Some(&good));
    assert!(matches!(err, Err(Error::Numerical(_))), "{:?}", err.err());
    let saved = Checkpoint::load(&good).unwrap();
    assert!(saved.model.params.iter().all(|(_, p)| p.value.iter().all(|v| v.is_finite())));
}

#[test]
fn execution_modes_agree_bit_for_bit() {
    let corpus = Corpus::in_memory(&small_spec(32), 4).unwrap();
    let mut cfg = small_model();
    cfg.prune = PruneSchedule::uniform(&[2], 0.5, 0.5);
    let model = Model::init(cfg, 5).unwrap();
    let batch = [0, 3, 5, 6, 9, 12];
    let step = |e| step_gradients(&model, &corpus, &batch, 7, 0, 0, 0.5, e).unwrap();
    let (seq, par) = (step(Execution::Sequential), step(Execution::Parallel));
    assert_eq!((seq.vtc, seq.vtm, seq.mlm), (par.vtc, par.vtm, par.mlm));
    assert_eq!(seq.grads, par.grads);
    let clips = corpus.split(Split::Eval);
    let embed = |e| embed_split(&model, &corpus, &clips, 0, None, e).unwrap();
    assert_eq!(embed(Execution::Sequential), embed(Execution::Parallel));
}

#[test]
fn retrieval_is_well_formed() {
    let corpus = Corpus::in_memory(&small_spec(64), 1).unwrap();
    let model = Model::init(small_model(), 3).unwrap();
    let r = evaluate_retrieval(&model, &corpus, 0, Default::default()).unwrap();
    assert_eq!(r.ranks.len(), 16);
    assert!(r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= 100.0);
    assert!(r.ranks.iter().all(|&k| k < 16));
    assert_eq!(r, evaluate_retrieval(&model, &corpus, 0, Default::default()).unwrap());
}

#[test]
fn probe_needs_two_frames_and_identity_changes_nothing() {
    let corpus = Corpus::in_memory(&small_spec(24), 1).unwrap();
    let one = Model::init(ModelConfig { frames: 1, ..small_model() }, 3).unwrap();
    assert!(matches!(temporal_probe(&one, &corpus, 0, Default::default()), Err(Error::InvalidArgument(_))));

    let model = Model::init(small_model(), 3).unwrap();
    let identity = vec![vec![0, 1]; corpus.split(Split::Eval).len()];
    let p = probe_with_orders(&model, &corpus, 0, &identity, Default::default()).unwrap();
    assert_eq!(p.normal, p.shuffled);
    assert_eq!(p.delta, 0.0);
    let q = temporal_probe(&model, &corpus, 0, Default::default()).unwrap();
    assert_eq!(q.normal, p.normal);
}

#[test]
fn masks_keep_the_scheduled_fraction() {
    let corpus = Corpus::in_memory(&small_spec(4), 1).unwrap();
    let base = ModelConfig {
        frames: 4,
        ..small_model()
    };
    let idx = eval_frames(&corpus, 0, 4, 0).unwrap();
    let clip = corpus.clip(0, &idx);

    let none = Model::init(base.clone(), 1).unwrap();
    assert!(export_masks(&none, &clip, 0).is_err());

    let full = Model::init(
        ModelConfig {
            prune: PruneSchedule {
                visual_layers: vec![1, 2],
                visual_keep_rates: vec![1.0, 1.0],
                ..PruneSchedule::none()
            },
            ..base.clone()
        },
        1,
    )
    .unwrap();
    for m in export_masks(&full, &clip, 0).unwrap() {
        assert!(m.alive.iter().all(|&a| a));
    }

    let half = Model::init(
        ModelConfig {
            prune: PruneSchedule::uniform(&[1, 2], 0.5, 1.0),
            ..base
        },
        1,
    )
    .unwrap();
    let masks = export_masks(&half, &clip, 0).unwrap();
    assert_eq!(masks.len(), 2);
    let n = masks[0].alive.len();
    let first = keep_count(n, 0.5).unwrap();
    assert_eq!(masks[0].alive.iter().filter(|&&a| a).count(), first);
    assert_eq!(masks[1].alive.iter().filter(|&&a| a).count(), keep_count(first, 0.5).unwrap());
    assert!(masks[0].alive.iter().zip(&masks[1].alive).all(|(a, b)| *a || !*b));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_masks_csv(&path, &masks).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * n);
    assert_eq!(text.lines().next(), Some("layer,frame,row,col,kept"));
}

#[test]
fn entering_a_longer_stage_expands_the_checkpoint() {
    let cfg = small_model();
    let s1 = dense_stage(2, 1, 1e-3, 4);
    let s2 = Stage {
        k_local: Some(1),
        k_random: Some(1),
        block_size: Some(2),
        q_v: 0.5,
        ..dense_stage(4, 1, 1e-3, 4)
    };
    let ck = fresh(&cfg, &s1, 0);
    assert!(enter_stage(None, &cfg, &s2, 1, 0).is_err());
    let next = enter_stage(Some(&ck), &cfg, &s2, 1, 0).unwrap();
    assert_eq!(next.meta.stage, 1);
    assert_eq!(next.meta.step, 0);
    assert_eq!(next.model.config.frames, 4);
    assert!(next.model.config.sparsity != cfg.sparsity);
    assert!(!next.model.config.prune.visual_layers.is_empty());
    let same = enter_stage(Some(&next), &cfg, &s2, 1, 0).unwrap();
    assert_eq!(same.model, next.model);
}

#[test]
fn checkpoints_round_trip() {
    let ck = Checkpoint::new(
        Model::init(small_model(), 5).unwrap(),
        StageMeta {
            stage: 0,
            frame_history: vec![2],
            step: 0,
            seed: 5,
        },
    );
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read_from(bad.as_slice()).is_err());
    assert!(Checkpoint::read_from(&bytes[..bytes.len() / 2]).is_err());
}
