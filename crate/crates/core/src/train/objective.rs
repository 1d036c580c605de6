use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adalabel::{batch_targets, AblationMode, AdaLabelConfig, TargetRecipe};
use crate::baselines::{ls_target, BaselineConfig};
use crate::data::{TokenBatch, PAD};
use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::numerics::{Graph, Scalar, Var};

/// Training objective for the dialogue decoder. The auxiliary decoder is
/// always trained with plain cross entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ce,
    Ls,
    Fl,
    Cp,
    Adalabel,
    Ablation(TargetRecipe),
}

impl Default for Objective {
    fn default() -> Self {
        Objective::Adalabel
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "ce" => Objective::Ce,
            "ls" => Objective::Ls,
            "fl" => Objective::Fl,
            "cp" => Objective::Cp,
            "adalabel" => Objective::Adalabel,
            other => Objective::Ablation(other.parse::<AblationMode>()?.recipe()),
        })
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Ce => f.write_str("ce"),
            Objective::Ls => f.write_str("ls"),
            Objective::Fl => f.write_str("fl"),
            Objective::Cp => f.write_str("cp"),
            Objective::Adalabel => f.write_str("adalabel"),
            Objective::Ablation(r) => write!(f, "ablation({:?}, {:?})", r.epsilon, r.v),
        }
    }
}

/// What the dialogue loss is computed against.
#[derive(Clone, Debug)]
pub enum DialogueTarget<T> {
    /// Dense `[rows, vocab]` soft targets (CE, LS, adaptive).
    Dense(Arc<Vec<T>>),
    Focal { gamma: T },
    Penalty { weight: T },
}

/// Targets for one micro-batch, fixed before any gradient is taken.
#[derive(Clone, Debug)]
pub struct PreparedTargets<T> {
    pub dialogue: DialogueTarget<T>,
    pub hard: Arc<Vec<T>>,
    pub target_ids: Vec<usize>,
    /// Per-row loss weight: `1 / normalizer` on real tokens, 0 on padding.
    pub weights: Vec<T>,
    pub stats: TargetStats,
}

/// Sums over real target positions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TargetStats {
    pub positions: usize,
    /// Mass the training target puts on the reference token.
    pub sum_eps: f64,
    pub sum_pmax: f64,
}

impl TargetStats {
    pub fn merge(&mut self, o: &TargetStats) {
        self.positions += o.positions;
        self.sum_eps += o.sum_eps;
        self.sum_pmax += o.sum_pmax;
    }
}

fn onehot_rows<T: Scalar>(ids: &[usize], real: &[bool], vocab: usize) -> Vec<T> {
    let mut q = vec![T::zero(); ids.len() * vocab];
    for (r, (&id, &ok)) in ids.iter().zip(real).enumerate() {
        if ok {
            q[r * vocab + id] = T::one();
        }
    }
    q
}

/// Builds the targets for a micro-batch from detached logits.
#[allow(clippy::too_many_arguments)]
pub fn prepare_targets<T: Scalar, R: Rng + ?Sized>(
    objective: Objective,
    dialogue_logits: &[T],
    aux_logits: &[T],
    vocab: usize,
    batch: &TokenBatch,
    normalizer: usize,
    adalabel: &AdaLabelConfig,
    baselines: &BaselineConfig,
    rng: &mut R,
) -> Result<PreparedTargets<T>> {
    let ids = &batch.dec_out.ids;
    let rows = ids.len();
    if dialogue_logits.len() != rows * vocab {
        return Err(Error::ShapeMismatch("logits do not match decoder output".into()));
    }
    let real: Vec<bool> = batch.dec_out.pad_mask().iter().map(|&p| !p).collect();
    debug_assert!(ids.iter().zip(&real).all(|(&i, &r)| !r || i != PAD));
    let w = T::one() / T::from_usize_lossy(normalizer.max(1));
    let weights: Vec<T> = real.iter().map(|&r| if r { w } else { T::zero() }).collect();
    let hard = Arc::new(onehot_rows::<T>(ids, &real, vocab));

    let mut stats = TargetStats::default();
    for (r, &ok) in real.iter().enumerate() {
        if ok {
            let row = &dialogue_logits[r * vocab..(r + 1) * vocab];
            stats.positions += 1;
            stats.sum_pmax += max_prob(row);
        }
    }

    let dialogue = match objective {
        Objective::Ce => {
            stats.sum_eps = stats.positions as f64;
            DialogueTarget::Dense(Arc::clone(&hard))
        }
        Objective::Ls => {
            let s = T::from_f64_lossy(baselines.ls_smoothing);
            let mut q = vec![T::zero(); rows * vocab];
            for (r, (&id, &ok)) in ids.iter().zip(&real).enumerate() {
                if ok {
                    let t = ls_target(id, vocab, s);
                    stats.sum_eps += t[id].to_f64_lossy();
                    q[r * vocab..(r + 1) * vocab].copy_from_slice(&t);
                }
            }
            DialogueTarget::Dense(Arc::new(q))
        }
        Objective::Fl => {
            stats.sum_eps = stats.positions as f64;
            DialogueTarget::Focal {
                gamma: T::from_f64_lossy(baselines.fl_gamma),
            }
        }
        Objective::Cp => {
            stats.sum_eps = stats.positions as f64;
            DialogueTarget::Penalty {
                weight: T::from_f64_lossy(baselines.cp_weight),
            }
        }
        Objective::Adalabel | Objective::Ablation(_) => {
            let recipe = match objective {
                Objective::Ablation(r) => r,
                _ => TargetRecipe::ADALABEL,
            };
            let targets: Vec<Option<usize>> = ids
                .iter()
                .zip(&real)
                .map(|(&id, &ok)| ok.then_some(id))
                .collect();
            let tb = batch_targets(dialogue_logits, aux_logits, vocab, &targets, recipe, adalabel, rng)?;
            stats.sum_eps = tb
                .factors
                .iter()
                .flatten()
                .map(|f| f.epsilon.to_f64_lossy())
                .sum();
            DialogueTarget::Dense(Arc::new(tb.dist))
        }
    };
    Ok(PreparedTargets {
        dialogue,
        hard,
        target_ids: ids.clone(),
        weights,
        stats,
    })
}

fn max_prob<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&v| (v - max).exp()).sum();
    (T::one() / z).to_f64_lossy()
}

/// Loss nodes for one micro-batch.
pub struct LossNodes {
    pub dialogue: Var,
    pub auxiliary: Var,
    pub total: Var,
}

/// Assembles `dialogue + aux_weight * auxiliary` on the tape, with every
/// target treated as a constant.
pub fn loss_from_targets<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardOutput,
    targets: &PreparedTargets<T>,
    aux_weight: T,
) -> Result<LossNodes> {
    let dialogue = match &targets.dialogue {
        DialogueTarget::Dense(q) => g.soft_cross_entropy(out.dialogue, Arc::clone(q), &targets.weights)?,
        DialogueTarget::Focal { gamma } => {
            g.focal_loss(out.dialogue, &targets.target_ids, &targets.weights, *gamma)?
        }
        DialogueTarget::Penalty { weight } => {
            g.confidence_penalty(out.dialogue, &targets.target_ids, &targets.weights, *weight)?
        }
    };
    let auxiliary = g.soft_cross_entropy(out.auxiliary, Arc::clone(&targets.hard), &targets.weights)?;
    let scaled = g.scale(auxiliary, aux_weight);
    let total = g.add(dialogue, scaled);
    Ok(LossNodes {
        dialogue,
        auxiliary,
        total,
    })
}
