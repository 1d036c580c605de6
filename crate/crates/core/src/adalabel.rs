//! Adaptive soft targets.
//!
//! For every target position the soft target is
//! `q' = eps * onehot(y) + (1 - eps) * v`, where `v` is the auxiliary decoder's
//! distribution with the target masked out and its ranking truncated, and
//! `eps` comes from the dialogue model's own (detached) confidence:
//!
//! ```text
//! p_max  = max_k p_k
//! lambda = max(v) / (1 + max(v)) + eta
//! alpha  = (p_y / p_max)^2
//! eps    = 1 - alpha * (1 - max(p_max, lambda))
//! ```
//!
//! `lambda` keeps the target at least `eta` above every other entry of `q'`;
//! `alpha` raises `eps` for targets the model currently under-predicts.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, soft_cross_entropy, softmax, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaLabelConfig {
    /// Margin between the target and the best non-target in `q'`.
    pub eta: f64,
    /// First kept rank (1-based) of the non-target logits.
    pub trunc_low: usize,
    /// Last kept rank; clamped to `|V| - 1`.
    pub trunc_high: usize,
    /// Softmax temperature applied to the kept auxiliary logits.
    pub temperature: f64,
    /// Candidate values for the fixed-epsilon ablation sweep.
    pub fixed_epsilon_grid: Vec<f64>,
}

impl Default for AdaLabelConfig {
    fn default() -> Self {
        AdaLabelConfig {
            eta: 0.2,
            trunc_low: 2,
            trunc_high: 500,
            temperature: 1.0,
            fixed_epsilon_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }
}

impl AdaLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::config("adalabel.eta", "must be positive"));
        }
        if self.trunc_low < 1 || self.trunc_low > self.trunc_high {
            return Err(Error::config(
                "adalabel.trunc_low",
                format!("need 1 <= trunc_low ({}) <= trunc_high ({})", self.trunc_low, self.trunc_high),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("adalabel.temperature", "must be positive"));
        }
        if self.fixed_epsilon_grid.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::config("adalabel.fixed_epsilon_grid", "values must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Per-position factors, all computed on detached copies of `p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptionFactors<T> {
    pub p_max: T,
    pub alpha: T,
    pub lambda: T,
    pub epsilon: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveTarget<T> {
    pub dist: Vec<T>,
    pub target: usize,
}

/// How `eps` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonRule {
    /// `1 - alpha * (1 - max(p_max, lambda))`.
    Adaptive,
    /// `max(p_max, lambda)`, i.e. alpha fixed at 1.
    NoAlpha,
    Fixed(f64),
}

/// Where `v` comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxSource {
    /// Auxiliary decoder, ranks `n..=m` kept.
    Truncated,
    /// Auxiliary decoder, only the tail (ranks > m) removed.
    HeadKept,
    /// Uniform over the non-target words.
    Uniform,
    /// A fresh random distribution over the non-target words per position.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRecipe {
    pub epsilon: EpsilonRule,
    pub v: AuxSource,
}

impl TargetRecipe {
    pub const ADALABEL: TargetRecipe = TargetRecipe {
        epsilon: EpsilonRule::Adaptive,
        v: AuxSource::Truncated,
    };
}

impl Default for TargetRecipe {
    fn default() -> Self {
        Self::ADALABEL
    }
}

/// Named single-knob ablations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AblationMode {
    FixedEpsilon(f64),
    NoAlpha,
    UniformV,
    RandomV,
    OrigV,
}

impl AblationMode {
    pub fn recipe(self) -> TargetRecipe {
        let mut r = TargetRecipe::ADALABEL;
        match self {
            AblationMode::FixedEpsilon(e) => r.epsilon = EpsilonRule::Fixed(e),
            AblationMode::NoAlpha => r.epsilon = EpsilonRule::NoAlpha,
            AblationMode::UniformV => r.v = AuxSource::Uniform,
            AblationMode::RandomV => r.v = AuxSource::Random,
            AblationMode::OrigV => r.v = AuxSource::HeadKept,
        }
        r
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "no_alpha" => return Ok(AblationMode::NoAlpha),
            "uniform_v" => return Ok(AblationMode::UniformV),
            "random_v" => return Ok(AblationMode::RandomV),
            "orig_v" => return Ok(AblationMode::OrigV),
            _ => {}
        }
        if let Some(arg) = s.strip_prefix("fixed_epsilon(").and_then(|r| r.strip_suffix(')')) {
            let e: f64 = arg
                .trim()
                .parse()
                .map_err(|_| Error::UnknownMode(s.to_string()))?;
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::InvalidEpsilon(e));
            }
            return Ok(AblationMode::FixedEpsilon(e));
        }
        Err(Error::UnknownMode(s.to_string()))
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationMode::FixedEpsilon(e) => write!(f, "fixed_epsilon({e})"),
            AblationMode::NoAlpha => f.write_str("no_alpha"),
            AblationMode::UniformV => f.write_str("uniform_v"),
            AblationMode::RandomV => f.write_str("random_v"),
            AblationMode::OrigV => f.write_str("orig_v"),
        }
    }
}

/// Non-target ids ordered by logit descending, ties by ascending id.
fn ranked_non_targets<T: Scalar>(logits: &[T], target: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).filter(|&k| k != target).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Auxiliary distribution `v`: mask the target, keep non-target ranks
/// `low..=high`, divide by the temperature and normalize.
pub fn truncated_distribution<T: Scalar>(
    aux_logits: &[T],
    target: usize,
    low: usize,
    high: usize,
    temperature: T,
) -> Result<Vec<T>> {
    let non_targets = aux_logits.len().saturating_sub(1);
    if low == 0 || low > non_targets {
        return Err(Error::EmptySupport);
    }
    let high = high.min(non_targets);
    let order = ranked_non_targets(aux_logits, target);
    let mut masked = vec![T::neg_infinity(); aux_logits.len()];
    for &k in &order[low - 1..high] {
        masked[k] = aux_logits[k];
    }
    softmax(&masked, temperature)
}

pub fn build_auxiliary_distribution<T: Scalar>(
    aux_logits: &[T],
    target: usize,
    cfg: &AdaLabelConfig,
) -> Result<Vec<T>> {
    truncated_distribution(
        aux_logits,
        target,
        cfg.trunc_low,
        cfg.trunc_high,
        T::from_f64_lossy(cfg.temperature),
    )
}

pub fn uniform_non_target<T: Scalar>(vocab: usize, target: usize) -> Vec<T> {
    let share = T::one() / T::from_usize_lossy(vocab - 1);
    (0..vocab)
        .map(|k| if k == target { T::zero() } else { share })
        .collect()
}

pub fn random_non_target<T: Scalar, R: Rng + ?Sized>(vocab: usize, target: usize, rng: &mut R) -> Vec<T> {
    let mut v: Vec<f64> = (0..vocab)
        .map(|k| if k == target { 0.0 } else { rng.gen::<f64>() + 1e-12 })
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v.into_iter().map(T::from_f64_lossy).collect()
}

fn max_of<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().fold(T::neg_infinity(), T::max)
}

/// Factors of `eps` for one position. `p` is the model distribution.
pub fn adaption_factor<T: Scalar>(p: &[T], target: usize, v: &[T], eta: T) -> AdaptionFactors<T> {
    let p_max = max_of(p);
    let p_t = p[target];
    let alpha = if p_t >= p_max {
        T::one()
    } else {
        let r = p_t / p_max;
        r * r
    };
    let mv = max_of(v);
    let lambda = mv / (T::one() + mv) + eta;
    let floor = p_max.max(lambda).min(T::one());
    let epsilon = T::one() - alpha * (T::one() - floor);
    AdaptionFactors {
        p_max,
        alpha,
        lambda,
        epsilon,
    }
}

/// `eps` under a given rule.
pub fn epsilon_for<T: Scalar>(rule: EpsilonRule, factors: &AdaptionFactors<T>) -> T {
    match rule {
        EpsilonRule::Adaptive => factors.epsilon,
        EpsilonRule::NoAlpha => factors.p_max.max(factors.lambda).min(T::one()),
        EpsilonRule::Fixed(e) => T::from_f64_lossy(e),
    }
}

/// `q' = eps * onehot(target) + (1 - eps) * v`.
pub fn mix_targets<T: Scalar>(target: usize, v: &[T], epsilon: T) -> Result<AdaptiveTarget<T>> {
    if !(epsilon > T::zero() && epsilon <= T::one()) {
        return Err(Error::InvalidEpsilon(epsilon.to_f64_lossy()));
    }
    let mut dist = Vec::with_capacity(v.len());
    mix_into(target, v, epsilon, &mut dist);
    Ok(AdaptiveTarget { dist, target })
}

fn mix_into<T: Scalar>(target: usize, v: &[T], epsilon: T, out: &mut Vec<T>) {
    let rest = T::one() - epsilon;
    out.extend(v.iter().enumerate().map(|(k, &vk)| {
        if k == target {
            epsilon
        } else {
            rest * vk
        }
    }));
}

/// Soft target and factors for one position under a recipe.
pub fn position_target<T: Scalar, R: Rng + ?Sized>(
    model_probs: &[T],
    aux_logits: &[T],
    target: usize,
    recipe: TargetRecipe,
    cfg: &AdaLabelConfig,
    rng: &mut R,
) -> Result<(AdaptiveTarget<T>, AdaptionFactors<T>)> {
    let vocab = model_probs.len();
    let temp = T::from_f64_lossy(cfg.temperature);
    let v = match recipe.v {
        AuxSource::Truncated => {
            truncated_distribution(aux_logits, target, cfg.trunc_low, cfg.trunc_high, temp)?
        }
        AuxSource::HeadKept => truncated_distribution(aux_logits, target, 1, cfg.trunc_high, temp)?,
        AuxSource::Uniform => uniform_non_target(vocab, target),
        AuxSource::Random => random_non_target(vocab, target, rng),
    };
    let factors = adaption_factor(model_probs, target, &v, T::from_f64_lossy(cfg.eta));
    let eps = epsilon_for(recipe.epsilon, &factors);
    let q = mix_targets(target, &v, eps)?;
    Ok((
        q,
        AdaptionFactors {
            epsilon: eps,
            ..factors
        },
    ))
}

/// Named ablation targets for one position.
pub fn ablation_targets<T: Scalar, R: Rng + ?Sized>(
    mode: AblationMode,
    model_probs: &[T],
    aux_logits: &[T],
    target: usize,
    cfg: &AdaLabelConfig,
    rng: &mut R,
) -> Result<AdaptiveTarget<T>> {
    position_target(model_probs, aux_logits, target, mode.recipe(), cfg, rng).map(|(q, _)| q)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome<T> {
    pub dialogue_loss: T,
    pub aux_loss: T,
    pub factors: AdaptionFactors<T>,
    pub target: AdaptiveTarget<T>,
}

/// Both losses for one position, evaluated without the tape.
pub fn adalabel_step<T: Scalar>(
    model_logits: &[T],
    aux_logits: &[T],
    target: usize,
    cfg: &AdaLabelConfig,
) -> Result<StepOutcome<T>> {
    if model_logits.len() != aux_logits.len() {
        return Err(Error::ShapeMismatch(format!(
            "model row has {} logits, auxiliary row {}",
            model_logits.len(),
            aux_logits.len()
        )));
    }
    let p = softmax(model_logits, T::one())?;
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    let (q, factors) = position_target(&p, aux_logits, target, TargetRecipe::ADALABEL, cfg, &mut unused)?;
    let dialogue_loss = soft_cross_entropy(&log_softmax(model_logits)?, &q.dist)?;
    let lv = log_softmax(aux_logits)?;
    let aux_loss = -lv[target];
    Ok(StepOutcome {
        dialogue_loss,
        aux_loss,
        factors,
        target: q,
    })
}

/// Dense soft targets for a batch of rows.
#[derive(Clone, Debug)]
pub struct TargetBatch<T> {
    /// Row-major `[rows, vocab]`; rows with no target are all zero.
    pub dist: Vec<T>,
    pub factors: Vec<Option<AdaptionFactors<T>>>,
}

/// Soft targets for `rows` positions. `targets[r] == None` marks padding.
pub fn batch_targets<T: Scalar, R: Rng + ?Sized>(
    model_logits: &[T],
    aux_logits: &[T],
    vocab: usize,
    targets: &[Option<usize>],
    recipe: TargetRecipe,
    cfg: &AdaLabelConfig,
    rng: &mut R,
) -> Result<TargetBatch<T>> {
    let rows = targets.len();
    if model_logits.len() != rows * vocab || aux_logits.len() != rows * vocab {
        return Err(Error::ShapeMismatch("batch_targets: logits vs targets".into()));
    }
    let mut dist = Vec::with_capacity(rows * vocab);
    let mut factors = Vec::with_capacity(rows);
    let mut probs = vec![T::zero(); vocab];
    for (r, t) in targets.iter().enumerate() {
        match *t {
            None => {
                dist.extend(std::iter::repeat(T::zero()).take(vocab));
                factors.push(None);
            }
            Some(t) => {
                let row = &model_logits[r * vocab..(r + 1) * vocab];
                crate::numerics::functional::softmax_into(row, T::one(), &mut probs)?;
                let aux = &aux_logits[r * vocab..(r + 1) * vocab];
                let (q, f) = position_target(&probs, aux, t, recipe, cfg, rng)?;
                dist.extend_from_slice(&q.dist);
                factors.push(Some(f));
            }
        }
    }
    Ok(TargetBatch { dist, factors })
}
