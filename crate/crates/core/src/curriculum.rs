//! Temporal sparse expansion: multi-stage schedules that lengthen clips
//! while increasing sparsity, and checkpoint expansion between stages.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, StageMeta};
use crate::costmodel::{edge_profile, sparsity, CostConfig, CostDims, EdgeMode};
use crate::encoder::{interpolate_pos_embed, interpolate_rel_pos_bias, Model, ModelConfig, SparsityConfig};
use crate::error::{invalid, Result};
use crate::gradengine::ParamStore;
use crate::pruning::PruneSchedule;

/// One curriculum stage. Omitting the block parameters means dense attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub frames: usize,
    pub q_v: f64,
    pub q_m: f64,
    #[serde(default)]
    pub k_local: Option<usize>,
    #[serde(default)]
    pub k_random: Option<usize>,
    #[serde(default)]
    pub block_size: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_epochs() -> usize {
    1
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    32
}

impl Stage {
    pub fn sparse(frames: usize, q_v: f64, q_m: f64, k_local: usize, k_random: usize, block_size: usize) -> Self {
        Stage {
            frames,
            q_v,
            q_m,
            k_local: Some(k_local),
            k_random: Some(k_random),
            block_size: Some(block_size),
            epochs: default_epochs(),
            lr: default_lr(),
            batch: default_batch(),
        }
    }

    pub fn sparsity(&self) -> Result<SparsityConfig> {
        match (self.k_local, self.k_random, self.block_size) {
            (None, None, None) => Ok(SparsityConfig::Dense),
            (Some(l), Some(r), Some(g)) => {
                let s = SparsityConfig::block(l, r, g);
                s.validate()?;
                Ok(s)
            }
            _ => invalid("k_local, k_random and block_size must be given together"),
        }
    }

    /// `K_l + K_r`, or `None` for a dense stage.
    pub fn block_budget(&self) -> Option<usize> {
        Some(self.k_local? + self.k_random?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return invalid("stage frames must be >= 1");
        }
        for (name, q) in [("q_v", self.q_v), ("q_m", self.q_m)] {
            if !(q > 0.0 && q <= 1.0) {
                return invalid(format!("{name} = {q} outside (0, 1]"));
            }
        }
        if self.batch == 0 || self.epochs == 0 {
            return invalid("batch and epochs must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate {} must be finite and >= 0", self.lr));
        }
        self.sparsity().map(|_| ())
    }

    /// Model configuration for this stage on top of `base`.
    pub fn apply_to(&self, base: &ModelConfig, prune_layers: &[usize]) -> Result<ModelConfig> {
        self.validate()?;
        let cfg = ModelConfig {
            frames: self.frames,
            sparsity: self.sparsity()?,
            prune: PruneSchedule::uniform(prune_layers, self.q_v, self.q_m),
            ..base.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cost_config(&self, dims: &CostDims) -> Result<CostConfig> {
        Ok(CostConfig::with_rates(self.frames, self.sparsity()?, self.q_v, self.q_m, dims))
    }
}

/// Ordered stages, serialized as a JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpansionSchedule {
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintId {
    /// Clip length must strictly increase.
    ClipLengthNotIncreasing,
    /// Visual keep rate must strictly decrease.
    KeepRateNotDecreasing,
    /// `(K_l + K_r) / T` must strictly decrease.
    EdgeBudgetNotDecreasing,
}

impl fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConstraintId::ClipLengthNotIncreasing => "clip_length_not_increasing",
            ConstraintId::KeepRateNotDecreasing => "keep_rate_not_decreasing",
            ConstraintId::EdgeBudgetNotDecreasing => "edge_budget_not_decreasing",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: ConstraintId,
    /// Zero-based indices of the offending adjacent stages.
    pub stages: (usize, usize),
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
    /// Non-fatal observations, such as block parameters changing between stages.
    pub notes: Vec<String>,
}

/// Checks every adjacent pair against the three strict chains. A dense
/// stage has an unbounded edge budget.
pub fn validate_schedule(schedule: &ExpansionSchedule) -> Result<ScheduleReport> {
    let stages = &schedule.stages;
    if stages.is_empty() {
        return invalid("schedule has no stages");
    }
    for (i, s) in stages.iter().enumerate() {
        s.validate()
            .map_err(|e| crate::Error::InvalidArgument(format!("stage {i}: {e}")))?;
    }
    let mut violations = Vec::new();
    let mut notes = Vec::new();
    for j in 1..stages.len() {
        let (a, b) = (&stages[j - 1], &stages[j]);
        let pair = (j - 1, j);
        if b.frames <= a.frames {
            violations.push(Violation {
                constraint: ConstraintId::ClipLengthNotIncreasing,
                stages: pair,
                detail: format!("T = {} then {}", a.frames, b.frames),
            });
        }
        if b.q_v >= a.q_v {
            violations.push(Violation {
                constraint: ConstraintId::KeepRateNotDecreasing,
                stages: pair,
                detail: format!("q_v = {} then {}", a.q_v, b.q_v),
            });
        }
        // a/Ta > b/Tb  <=>  a·Tb > b·Ta, with a dense stage as +infinity
        let decreasing = match (a.block_budget(), b.block_budget()) {
            (None, None) => false,
            (None, Some(_)) => true,
            (Some(_), None) => false,
            (Some(x), Some(y)) => x * b.frames > y * a.frames,
        };
        if !decreasing {
            violations.push(Violation {
                constraint: ConstraintId::EdgeBudgetNotDecreasing,
                stages: pair,
                detail: format!(
                    "(K_l+K_r)/T = {} then {}",
                    ratio_text(a.block_budget(), a.frames),
                    ratio_text(b.block_budget(), b.frames)
                ),
            });
        }
        if (a.k_local, a.k_random, a.block_size) != (b.k_local, b.k_random, b.block_size) {
            notes.push(format!("stages {} and {j}: block parameters change", j - 1));
        }
    }
    Ok(ScheduleReport {
        ok: violations.is_empty(),
        violations,
        notes,
    })
}

fn ratio_text(budget: Option<usize>, frames: usize) -> String {
    match budget {
        Some(b) => format!("{b}/{frames}"),
        None => "dense".into(),
    }
}

/// Overall edge sparsity of a stage.
pub fn compute_stage_sparsity(stage: &Stage, dims: &CostDims) -> Result<f64> {
    let cfg = stage.cost_config(dims)?;
    let profile = edge_profile(&cfg, dims, EdgeMode::Formula)?;
    Ok(sparsity(&profile, stage.frames, dims))
}

/// Moves a checkpoint from its clip length to `t2` frames: the absolute
/// position table and every relative-bias table are resampled in time, all
/// other tensors are copied unchanged. Optimizer state is dropped.
pub fn expand_checkpoint(ck: &Checkpoint, t2: usize) -> Result<Checkpoint> {
    let t1 = ck.model.config.frames;
    if t2 <= t1 {
        return invalid(format!("expansion needs more frames: {t1} -> {t2}"));
    }
    let config = ModelConfig {
        frames: t2,
        ..ck.model.config.clone()
    };
    let mut params = ParamStore::new();
    for (_, p) in ck.model.params.iter() {
        let value = if p.name == "vis.pos" {
            interpolate_pos_embed(&p.value, t1, t2)?
        } else if p.name.starts_with("vis.") && p.name.ends_with(".rel") {
            interpolate_rel_pos_bias(&p.value, t1, t2)?
        } else {
            p.value.clone()
        };
        params.insert(p.name.clone(), value)?;
    }
    let mut frame_history = ck.meta.frame_history.clone();
    if frame_history.last() != Some(&t1) {
        frame_history.push(t1);
    }
    frame_history.push(t2);
    Ok(Checkpoint {
        model: Model::from_parts(config, params)?,
        meta: StageMeta {
            stage: ck.meta.stage + 1,
            frame_history,
            step: 0,
            seed: ck.meta.seed,
        },
        optimizer: None,
    })
}
