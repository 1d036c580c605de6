//! Joint training of the dialogue and auxiliary decoders.

mod checkpoint;
mod objective;
mod optim;

pub use checkpoint::{BestScores, Checkpoint, FORMAT_VERSION, MAGIC};
pub use objective::{
    loss_from_targets, prepare_targets, DialogueTarget, LossNodes, Objective, PreparedTargets, TargetStats,
};
pub use optim::{Adam, AdamConfig};

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adalabel::AdaLabelConfig;
use crate::baselines::BaselineConfig;
use crate::data::{make_batches, sequential_batches, EncodedPair, TokenBatch, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::numerics::{Graph, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Evaluation rounds without improvement before stopping.
    pub patience: usize,
    /// Weight of the auxiliary decoder's cross entropy in the total loss.
    pub aux_weight: f64,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub baselines: BaselineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            objective: Objective::Adalabel,
            lr: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 64,
            grad_accum: 2,
            max_steps: 20_000,
            eval_every: 1000,
            patience: 10,
            aux_weight: 1.0,
            eval_batch_size: 64,
            seed: 0,
            baselines: BaselineConfig::default(),
        }
    }
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            lr: c.lr,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        for (name, b) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.grad_accum == 0 {
            return Err(Error::config("train.grad_accum", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be positive"));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::config("train.aux_weight", "must be non-negative"));
        }
        if let Objective::Ablation(r) = self.objective {
            if let crate::adalabel::EpsilonRule::Fixed(e) = r.epsilon {
                if !(e > 0.0 && e <= 1.0) {
                    return Err(Error::InvalidEpsilon(e));
                }
            }
        }
        self.baselines.validate()
    }
}

/// splitmix64 of `a` and `b`.
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Token-normalized total loss summed over the micro-batches.
    pub loss: f64,
    pub dialogue_loss: f64,
    pub aux_loss: f64,
    pub tokens: usize,
    pub stats: TargetStats,
}

/// Gradients summed over the micro-batches of one step.
pub struct StepGradients {
    pub grads: Vec<Vec<f32>>,
    pub report: StepReport,
}

pub struct Trainer {
    model: Seq2Seq<f32>,
    adam: Adam,
    cfg: TrainConfig,
    adalabel: AdaLabelConfig,
    step: u64,
    window: TargetStats,
    data: Vec<EncodedPair>,
    epoch: u64,
    queue: VecDeque<TokenBatch>,
}

impl Trainer {
    pub fn new(model: Seq2Seq<f32>, cfg: TrainConfig, adalabel: AdaLabelConfig, data: Vec<EncodedPair>) -> Result<Self> {
        cfg.validate()?;
        adalabel.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyInput("no training pairs".into()));
        }
        let adam = Adam::new(AdamConfig::from(&cfg), model.params());
        Ok(Trainer {
            model,
            adam,
            cfg,
            adalabel,
            step: 0,
            window: TargetStats::default(),
            data,
            epoch: 0,
            queue: VecDeque::new(),
        })
    }

    /// Continues from a saved checkpoint, reusing its optimizer state.
    pub fn resume(ck: &Checkpoint, data: Vec<EncodedPair>) -> Result<Self> {
        let mut t = Trainer::new(ck.model()?, ck.train_cfg.clone(), ck.adalabel_cfg.clone(), data)?;
        if let Some(adam) = &ck.adam {
            t.adam = adam.clone();
        }
        t.step = ck.step;
        Ok(t)
    }

    pub fn model(&self) -> &Seq2Seq<f32> {
        &self.model
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn adalabel_config(&self) -> &AdaLabelConfig {
        &self.adalabel
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Target statistics accumulated since the last call.
    pub fn take_window(&mut self) -> TargetStats {
        std::mem::take(&mut self.window)
    }

    fn next_batch(&mut self) -> TokenBatch {
        if self.queue.is_empty() {
            let seed = derive_seed(self.cfg.seed, self.epoch);
            self.queue.extend(make_batches(&self.data, self.cfg.batch_size, seed));
            self.epoch += 1;
        }
        self.queue.pop_front().expect("non-empty data yields batches")
    }

    /// One optimizer step over the next `grad_accum` micro-batches.
    pub fn step(&mut self) -> Result<StepReport> {
        let batches: Vec<TokenBatch> = (0..self.cfg.grad_accum).map(|_| self.next_batch()).collect();
        self.step_on(&batches)
    }

    /// One optimizer step with the given micro-batches.
    pub fn step_on(&mut self, batches: &[TokenBatch]) -> Result<StepReport> {
        let StepGradients { grads, report } = self.gradients(batches)?;
        self.adam.step(self.model.params_mut(), &grads);
        if let Some((i, _)) = self
            .model
            .params()
            .iter()
            .enumerate()
            .find(|(_, (_, t))| !t.all_finite())
        {
            return Err(Error::Divergence {
                step: report.step,
                detail: format!(
                    "parameter `{}` became non-finite\n{}",
                    self.model.params().name(i),
                    dump_batches(batches)
                ),
            });
        }
        self.step += 1;
        self.window.merge(&report.stats);
        Ok(report)
    }

    /// Gradients for one step without touching the parameters.
    pub fn gradients(&self, batches: &[TokenBatch]) -> Result<StepGradients> {
        let step = self.step + 1;
        let normalizer: usize = batches.iter().map(TokenBatch::target_tokens).sum();
        let params = self.model.params();
        let mut acc: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0f32; t.len()]).collect();
        let mut report = StepReport {
            step,
            loss: 0.0,
            dialogue_loss: 0.0,
            aux_loss: 0.0,
            tokens: normalizer,
            stats: TargetStats::default(),
        };
        let vocab = self.model.config().vocab_size;
        let aux_weight = self.cfg.aux_weight as f32;
        for (k, b) in batches.iter().enumerate() {
            let micro_seed = derive_seed(derive_seed(self.cfg.seed, step), k as u64);
            let mut g = Graph::<f32>::training(micro_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(micro_seed, 1));
            let out = self.model.forward(&mut g, &b.src, &b.dec_in)?;
            if !g.value(out.dialogue).all_finite() || !g.value(out.auxiliary).all_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite logits on micro-batch {k}\n{}", dump_batches(std::slice::from_ref(b))),
                });
            }
            let targets = prepare_targets(
                self.cfg.objective,
                g.value(out.dialogue).data(),
                g.value(out.auxiliary).data(),
                vocab,
                b,
                normalizer,
                &self.adalabel,
                &self.cfg.baselines,
                &mut rng,
            )?;
            let nodes = loss_from_targets(&mut g, &out, &targets, aux_weight)?;
            let loss = g.value(nodes.total).data()[0];
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss = {loss} on micro-batch {k}\n{}", dump_batches(std::slice::from_ref(b))),
                });
            }
            report.loss += loss as f64;
            report.dialogue_loss += g.value(nodes.dialogue).data()[0] as f64;
            report.aux_loss += g.value(nodes.auxiliary).data()[0] as f64;
            report.stats.merge(&targets.stats);
            let grads = g.backward(nodes.total)?;
            for (i, a) in acc.iter_mut().enumerate() {
                if let Some(gr) = grads.param(i) {
                    for (x, y) in a.iter_mut().zip(gr) {
                        *x += *y;
                    }
                }
            }
        }
        Ok(StepGradients { grads: acc, report })
    }
}

fn dump_batches(batches: &[TokenBatch]) -> String {
    let mut s = String::new();
    for (k, b) in batches.iter().enumerate() {
        for r in 0..b.len() {
            s.push_str(&format!(
                "batch {k} row {r}: src={:?} tgt={:?}\n",
                b.src.row(r),
                b.dec_out.row(r)
            ));
        }
    }
    s
}

/// Teacher-forced scores on held-out pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldOutScores {
    pub perplexity: f64,
    pub token_accuracy: f64,
    pub aux_accuracy: f64,
    pub tokens: usize,
}

#[derive(Default, Clone, Copy)]
struct EvalSums {
    nll: f64,
    correct: usize,
    aux_correct: usize,
    tokens: usize,
}

fn eval_batch<T: Scalar>(model: &Seq2Seq<T>, b: &TokenBatch) -> Result<EvalSums> {
    let mut g = Graph::<T>::new();
    let out = model.forward(&mut g, &b.src, &b.dec_in)?;
    let vocab = model.config().vocab_size;
    let dl = g.value(out.dialogue).data();
    let al = g.value(out.auxiliary).data();
    let pad = b.dec_out.pad_mask();
    let mut s = EvalSums::default();
    for (r, &t) in b.dec_out.ids.iter().enumerate() {
        if pad[r] {
            continue;
        }
        let row = &dl[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max.to_f64_lossy()
            + row
                .iter()
                .map(|&v| (v - max).to_f64_lossy().exp())
                .sum::<f64>()
                .ln();
        s.nll += lse - row[t].to_f64_lossy();
        s.correct += (crate::numerics::argmax(row) == t) as usize;
        s.aux_correct += (crate::numerics::argmax(&al[r * vocab..(r + 1) * vocab]) == t) as usize;
        s.tokens += 1;
    }
    Ok(s)
}

/// Perplexity and token accuracy of both decoders.
pub fn evaluate_held_out<T: Scalar>(model: &Seq2Seq<T>, pairs: &[EncodedPair], batch_size: usize) -> Result<HeldOutScores> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no held-out pairs".into()));
    }
    let batches = sequential_batches(pairs, batch_size.max(1));
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<EvalSums>> = {
        use rayon::prelude::*;
        batches.par_iter().map(|b| eval_batch(model, b)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<EvalSums>> = batches.iter().map(|b| eval_batch(model, b)).collect();
    let mut total = EvalSums::default();
    for p in parts {
        let p = p?;
        total.nll += p.nll;
        total.correct += p.correct;
        total.aux_correct += p.aux_correct;
        total.tokens += p.tokens;
    }
    let n = total.tokens.max(1) as f64;
    Ok(HeldOutScores {
        perplexity: (total.nll / n).exp(),
        token_accuracy: total.correct as f64 / n,
        aux_accuracy: total.aux_correct as f64 / n,
        tokens: total.tokens,
    })
}

/// One row of the step log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub perplexity: f64,
    pub accuracy: f64,
    pub aux_accuracy: f64,
    pub mean_eps: f64,
    pub mean_pmax: f64,
}

pub const STEP_LOG_HEADER: &str = "step\tppl\tacc\taux_acc\tmean_eps\tmean_pmax";

impl EvalRecord {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.perplexity, self.accuracy, self.aux_accuracy, self.mean_eps, self.mean_pmax
        )
    }
}

pub fn write_step_log(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "{STEP_LOG_HEADER}")?;
    for r in records {
        writeln!(f, "{}", r.tsv_row())?;
    }
    f.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    /// Parameters from the evaluation with the lowest perplexity.
    pub best: Checkpoint,
    /// Parameters and optimizer state after the last step.
    pub last: Checkpoint,
    pub log: Vec<EvalRecord>,
    pub stopped_early: bool,
}

/// Runs the schedule: step, evaluate every `eval_every` steps, stop on
/// `max_steps` or when neither perplexity nor accuracy improved for
/// `patience` evaluations. `on_eval` sees each log row as it is produced.
pub fn train(
    trainer: &mut Trainer,
    valid: &[EncodedPair],
    vocab: &Vocabulary,
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<TrainOutcome> {
    let cfg = trainer.cfg.clone();
    let snapshot = |t: &Trainer, best: Option<BestScores>, with_adam: bool| Checkpoint {
        model_cfg: t.model.config().clone(),
        adalabel_cfg: t.adalabel.clone(),
        train_cfg: t.cfg.clone(),
        vocab: vocab.clone(),
        step: t.step,
        best,
        params: t.model.params().clone(),
        adam: with_adam.then(|| t.adam.clone()),
    };
    let mut log = Vec::new();
    let mut best: Option<BestScores> = None;
    let mut best_ck: Option<Checkpoint> = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut stopped_early = false;
    let mut evaluated_at = trainer.step;

    let mut evaluate = |t: &mut Trainer, log: &mut Vec<EvalRecord>| -> Result<bool> {
        let scores = evaluate_held_out(&t.model, valid, cfg.eval_batch_size)?;
        let w = t.take_window();
        let denom = w.positions.max(1) as f64;
        let rec = EvalRecord {
            step: t.step,
            perplexity: scores.perplexity,
            accuracy: scores.token_accuracy,
            aux_accuracy: scores.aux_accuracy,
            mean_eps: w.sum_eps / denom,
            mean_pmax: w.sum_pmax / denom,
        };
        log::info!("{}", rec.tsv_row());
        on_eval(&rec);
        log.push(rec);
        let mut improved = false;
        if best.map_or(true, |b| scores.perplexity < b.perplexity) {
            best = Some(BestScores {
                step: t.step,
                perplexity: scores.perplexity,
                accuracy: scores.token_accuracy,
            });
            best_ck = Some(snapshot(t, best, false));
            improved = true;
        }
        if scores.token_accuracy > best_acc {
            best_acc = scores.token_accuracy;
            improved = true;
        }
        stale = if improved { 0 } else { stale + 1 };
        Ok(stale >= cfg.patience)
    };

    while trainer.step < cfg.max_steps {
        trainer.step()?;
        if trainer.step % cfg.eval_every == 0 {
            evaluated_at = trainer.step;
            if evaluate(trainer, &mut log)? {
                stopped_early = true;
                break;
            }
        }
    }
    if evaluated_at != trainer.step || log.is_empty() {
        evaluate(trainer, &mut log)?;
    }
    let best_final = best;
    let mut best_ck = best_ck.expect("at least one evaluation ran");
    best_ck.best = best_final;
    let last = snapshot(trainer, best_final, true);
    Ok(TrainOutcome {
        best: best_ck,
        last,
        log,
        stopped_early,
    })
}
