use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use svitt::checkpoint::Checkpoint;
use svitt::costmodel::{cost_report, CostConfig, CostDims};
use svitt::curriculum::{expand_checkpoint, validate_schedule};
use svitt::encoder::SparsityConfig;
use svitt::harness::{
    enter_stage, evaluate_retrieval, export_masks, generate_corpus, run_curriculum, stage_paths, temporal_probe,
    train_stage, write_masks_csv, write_metrics, Corpus, RunConfig,
};
use svitt::{Error, Execution, Result};

#[derive(Parser)]
#[command(name = "svitt", version, about = "Sparse video-text transformer at desk scale")]
struct Cli {
    /// JSON run configuration (model, corpus, schedule, train).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Corpus directory written by `gen-data`.
    #[arg(long, default_value = "data")]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus into --out.
    GenData {
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the whole schedule, or one stage of it.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Train only this stage (0-based).
        #[arg(long)]
        stage: Option<usize>,
        /// Starting checkpoint: the previous stage's output, or a partial run to resume.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Interpolate a checkpoint's positional tables to a new clip length.
    Expand {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: usize,
    },
    /// Text-to-video retrieval on the evaluation split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Retrieval with normal and shuffled frame order.
    Probe {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Edge, FLOP and memory estimates (JSON on stdout, table on stderr).
    Cost {
        /// Use the full-size dimensions instead of the configured model.
        #[arg(long)]
        paper_dims: bool,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long)]
        k_local: Option<usize>,
        #[arg(long)]
        k_random: Option<usize>,
        #[arg(long)]
        block_size: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        q_v: f64,
        #[arg(long, default_value_t = 1.0)]
        q_m: f64,
    },
    /// Keep-mask CSV for one clip at every visual pruning site.
    ExportMasks {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        clip: usize,
    },
    /// Check the configured schedule's monotonicity constraints.
    ValidateSchedule,
}

fn load_config(path: Option<&Path>, seed: u64) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.train.seed = seed;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    print_line(&serde_json::to_string_pretty(value)?)
}

fn print_line(text: &str) -> Result<()> {
    writeln!(std::io::stdout().lock(), "{text}")?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_path();
    let exec = Execution::default();
    match cli.command {
        Command::GenData { clips, frames } => {
            let mut spec = cfg.corpus.clone();
            spec.n_clips = clips.unwrap_or(spec.n_clips);
            spec.frames = frames.unwrap_or(spec.frames);
            spec.n_eval = spec.n_eval.min(spec.n_clips);
            let m = generate_corpus(out, &spec, cli.seed)?;
            eprintln!("wrote {} clips to {}", m.clips.len(), out.display());
        }
        Command::Train {
            data,
            stage,
            init,
            max_steps,
        } => {
            let corpus = Corpus::load(&data.data)?;
            let mut opts = cfg.train.clone();
            opts.max_steps = max_steps.or(opts.max_steps);
            let report = validate_schedule(&cfg.schedule)?;
            if !report.ok {
                eprintln!("{}", serde_json::to_string_pretty(&report)?);
                return Err(Error::InvalidArgument("schedule violates its constraints".into()));
            }
            match stage {
                None => {
                    if init.is_some() {
                        return Err(Error::InvalidArgument("--init needs --stage".into()));
                    }
                    let run = run_curriculum(&cfg.schedule, &cfg.model, &corpus, &opts, Some(out))?;
                    eprintln!("trained {} stages into {}", run.stages.len(), out.display());
                }
                Some(j) => {
                    let st = cfg
                        .schedule
                        .stages
                        .get(j)
                        .ok_or_else(|| Error::InvalidArgument(format!("schedule has no stage {j}")))?;
                    let prev = init.as_deref().map(Checkpoint::load).transpose()?;
                    let ck = enter_stage(prev.as_ref(), &cfg.model, st, j, cli.seed)?;
                    let (ckpt_path, metrics_path) = stage_paths(out, j);
                    let last_good = out.join(format!("stage{j}_last_good.ckpt"));
                    let outcome = train_stage(ck, st, &corpus, &opts, Some(&last_good))?;
                    outcome.checkpoint.save(&ckpt_path)?;
                    write_metrics(&metrics_path, &outcome.metrics)?;
                    eprintln!("stage {j}: {} steps -> {}", outcome.metrics.len(), ckpt_path.display());
                }
            }
        }
        Command::Expand { ckpt, frames } => {
            let ck = expand_checkpoint(&Checkpoint::load(&ckpt)?, frames)?;
            let path = out.join("expanded.ckpt");
            ck.save(&path)?;
            eprintln!("expanded to {frames} frames -> {}", path.display());
        }
        Command::Eval { data, ckpt } => {
            let corpus = Corpus::load(&data.data)?;
            let ck = Checkpoint::load(&ckpt)?;
            let r = evaluate_retrieval(&ck.model, &corpus, cli.seed, exec)?;
            write_json(&out.join("retrieval.json"), &r)?;
            print_line(&format!(
                "{{\"r1\": {}, \"r5\": {}, \"r10\": {}, \"mean\": {}}}",
                r.r1, r.r5, r.r10, r.mean
            ))?;
        }
        Command::Probe { data, ckpt } => {
            let corpus = Corpus::load(&data.data)?;
            let ck = Checkpoint::load(&ckpt)?;
            let p = temporal_probe(&ck.model, &corpus, cli.seed, exec)?;
            write_json(&out.join("probe.json"), &p)?;
            print_line(&format!(
                "{{\"normal\": {}, \"shuffled\": {}, \"delta\": {}}}",
                p.normal.mean, p.shuffled.mean, p.delta
            ))?;
        }
        Command::Cost {
            paper_dims,
            frames,
            k_local,
            k_random,
            block_size,
            q_v,
            q_m,
        } => {
            let dims = if paper_dims {
                CostDims::full_size()
            } else {
                CostDims::from_model(&cfg.model)
            };
            let sparsity = match (k_local, k_random, block_size) {
                (None, None, None) => SparsityConfig::Dense,
                (Some(l), Some(r), Some(g)) => SparsityConfig::block(l, r, g),
                _ => {
                    return Err(Error::InvalidArgument(
                        "--k-local, --k-random and --block-size go together".into(),
                    ))
                }
            };
            let report = cost_report(&CostConfig::with_rates(frames, sparsity, q_v, q_m, &dims), &dims)?;
            eprint!("{}", report.table());
            print_json(&report)?;
        }
        Command::ExportMasks { data, ckpt, clip } => {
            let corpus = Corpus::load(&data.data)?;
            if clip >= corpus.frames.len() {
                return Err(Error::InvalidArgument(format!("corpus has no clip {clip}")));
            }
            let ck = Checkpoint::load(&ckpt)?;
            let idx = svitt::harness::eval_frames(&corpus, clip, ck.model.config.frames, cli.seed)?;
            let masks = export_masks(&ck.model, &corpus.clip(clip, &idx), cli.seed)?;
            let path = out.join(format!("masks_clip{clip}.csv"));
            fs::create_dir_all(out)?;
            write_masks_csv(&path, &masks)?;
            eprintln!("{} masks -> {}", masks.len(), path.display());
        }
        Command::ValidateSchedule => {
            // violations go to stderr so a failing gate leaves stdout empty
            let report = validate_schedule(&cfg.schedule)?;
            if !report.ok {
                eprintln!("{}", serde_json::to_string_pretty(&report)?);
                return Err(Error::InvalidArgument("schedule violates its constraints".into()));
            }
            print_json(&report)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Format(_) | Error::Json(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("svitt: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
