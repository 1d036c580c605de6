//! Greedy, beam and top-k decoding over any next-token scorer.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PaddedIds, BOS, EOS, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::model::{EncoderMemory, Seq2Seq};
use crate::numerics::{Graph, Tensor};
use crate::train::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Greedy,
    Beam {
        width: usize,
        /// Rank finished hypotheses by mean log-probability per token.
        length_norm: bool,
    },
    TopK {
        k: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub scheme: Scheme,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            scheme: Scheme::Greedy,
            max_len: 100,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::config("decode.max_len", "must be positive"));
        }
        match self.scheme {
            Scheme::Beam { width: 0, .. } => Err(Error::config("decode.scheme.beam.width", "must be positive")),
            Scheme::TopK { k: 0 } => Err(Error::config("decode.scheme.top_k.k", "must be positive")),
            _ => Ok(()),
        }
    }
}

/// Scores the next token for a batch of prefixes sharing one context.
pub trait StepModel {
    type Session;

    fn vocab_size(&self) -> usize;

    /// Longest prefix the model accepts.
    fn max_prefix(&self) -> usize {
        usize::MAX
    }

    fn begin(&self, context: &[usize]) -> Result<Self::Session>;

    /// One logit row per prefix. Prefixes exclude the leading BOS.
    fn next_logits(&self, session: &Self::Session, prefixes: &[&[usize]]) -> Result<Vec<Vec<f32>>>;
}

/// A decoded response.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids without the terminating EOS.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of scored tokens.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + self.finished as usize
    }

    pub fn normalized_score(&self) -> f64 {
        self.log_prob / self.scored_len().max(1) as f64
    }
}

/// Log-probabilities with every reserved id except EOS removed.
pub fn masked_log_probs(logits: &[f32]) -> Vec<f64> {
    let allowed = |i: usize| i >= NUM_RESERVED || i == EOS;
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| (v as f64 - max).exp())
        .sum();
    let lse = max + z.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { v as f64 - lse } else { f64::NEG_INFINITY })
        .collect()
}

fn best_id(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

fn step_limit<M: StepModel>(model: &M, max_len: usize) -> usize {
    max_len.min(model.max_prefix())
}

pub fn greedy<M: StepModel>(model: &M, context: &[usize], max_len: usize) -> Result<Hypothesis> {
    let session = model.begin(context)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..step_limit(model, max_len) {
        let logits = model.next_logits(&session, &[&tokens])?;
        let lp = masked_log_probs(&logits[0]);
        let w = best_id(&lp);
        log_prob += lp[w];
        if w == EOS {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                finished: true,
            });
        }
        tokens.push(w);
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished: false,
    })
}

pub fn beam_search<M: StepModel>(
    model: &M,
    context: &[usize],
    width: usize,
    length_norm: bool,
    max_len: usize,
) -> Result<Hypothesis> {
    let width = width.max(1);
    let score = |h: &Hypothesis| if length_norm { h.normalized_score() } else { h.log_prob };
    let session = model.begin(context)?;
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..step_limit(model, max_len) {
        let prefixes: Vec<&[usize]> = live.iter().map(|(t, _)| t.as_slice()).collect();
        let logits = model.next_logits(&session, &prefixes)?;
        // (beam, token, total log-prob), best first; ties keep the earlier beam, then the lower id
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (b, row) in logits.iter().enumerate() {
            let lp = masked_log_probs(row);
            for (w, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cands.push((b, w, live[b].1 + l));
                }
            }
        }
        cands.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        let mut next = Vec::with_capacity(width);
        for (rank, &(b, w, total)) in cands.iter().enumerate() {
            if next.len() == width {
                break;
            }
            if w == EOS {
                if rank < width {
                    finished.push(Hypothesis {
                        tokens: live[b].0.clone(),
                        log_prob: total,
                        finished: true,
                    });
                }
            } else {
                let mut t = live[b].0.clone();
                t.push(w);
                next.push((t, total));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if finished.len() >= width {
            // Raw scores only fall, so a live beam below the best finished one can never win.
            // Normalized search stops here outright, which keeps width 1 identical to greedy.
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if length_norm || live.iter().all(|(_, s)| *s <= best_done) {
                break;
            }
        }
    }
    if finished.is_empty() {
        finished.extend(live.into_iter().map(|(tokens, log_prob)| Hypothesis {
            tokens,
            log_prob,
            finished: false,
        }));
    }
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if score(h) > score(&finished[best]) {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}

/// Samples from the `k` most likely tokens at each step.
pub fn top_k_sample<M: StepModel>(model: &M, context: &[usize], k: usize, max_len: usize, seed: u64) -> Result<Hypothesis> {
    let k = k.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let session = model.begin(context)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..step_limit(model, max_len) {
        let logits = model.next_logits(&session, &[&tokens])?;
        let lp = masked_log_probs(&logits[0]);
        let mut order: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
        order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
        order.truncate(k);
        let w = if order.len() == 1 {
            order[0]
        } else {
            let top = lp[order[0]];
            let weights: Vec<f64> = order.iter().map(|&i| (lp[i] - top).exp()).collect();
            let dist = WeightedIndex::new(&weights).map_err(|_| Error::EmptySupport)?;
            order[dist.sample(&mut rng)]
        };
        log_prob += lp[w];
        if w == EOS {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                finished: true,
            });
        }
        tokens.push(w);
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished: false,
    })
}

pub fn decode_one<M: StepModel>(model: &M, context: &[usize], cfg: &DecodeConfig, index: u64) -> Result<Hypothesis> {
    match cfg.scheme {
        Scheme::Greedy => greedy(model, context, cfg.max_len),
        Scheme::Beam { width, length_norm } => beam_search(model, context, width, length_norm, cfg.max_len),
        Scheme::TopK { k } => top_k_sample(model, context, k, cfg.max_len, derive_seed(cfg.seed, index)),
    }
}

/// Decodes every context; results are independent of the thread count.
#[cfg(feature = "parallel")]
pub fn decode_all<M: StepModel + Sync>(model: &M, contexts: &[Vec<usize>], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    use rayon::prelude::*;
    cfg.validate()?;
    contexts
        .par_iter()
        .enumerate()
        .map(|(i, c)| decode_one(model, c, cfg, i as u64))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn decode_all<M: StepModel>(model: &M, contexts: &[Vec<usize>], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    contexts
        .iter()
        .enumerate()
        .map(|(i, c)| decode_one(model, c, cfg, i as u64))
        .collect()
}

/// Encoder states for one context, reused across decoding steps.
pub struct EncodedContext {
    states: Tensor<f32>,
    len: usize,
}

impl StepModel for Seq2Seq<f32> {
    type Session = EncodedContext;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_prefix(&self) -> usize {
        self.config().max_len - 1
    }

    fn begin(&self, context: &[usize]) -> Result<EncodedContext> {
        let ctx: Vec<usize> = if context.is_empty() {
            vec![crate::data::UNK]
        } else {
            context[..context.len().min(self.config().max_len)].to_vec()
        };
        let mut g = Graph::new();
        let mem = self.encode(&mut g, &PaddedIds::from_rows(&[ctx.clone()]))?;
        Ok(EncodedContext {
            states: g.value(mem.states).clone(),
            len: ctx.len(),
        })
    }

    fn next_logits(&self, session: &EncodedContext, prefixes: &[&[usize]]) -> Result<Vec<Vec<f32>>> {
        let n = prefixes.len();
        let hidden = self.config().hidden;
        let one = session.states.data();
        let mut data = Vec::with_capacity(n * one.len());
        for _ in 0..n {
            data.extend_from_slice(one);
        }
        let mut g = Graph::new();
        let states = g.constant(Tensor::new(vec![n, session.len, hidden], data)?);
        let memory = EncoderMemory {
            states,
            pad_mask: vec![false; n * session.len],
            batch: n,
            len: session.len,
        };
        let rows: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let dec_in = PaddedIds::from_rows(&rows);
        let logits = self.dialogue_decoder_forward(&mut g, &dec_in, &memory)?;
        let v = self.config().vocab_size;
        let all = g.value(logits).data();
        Ok(rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let at = (r * dec_in.len + row.len() - 1) * v;
                all[at..at + v].to_vec()
            })
            .collect())
    }
}

/// One line of a generations file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerationRow {
    pub context: String,
    pub reference: String,
    pub hypothesis: String,
}

/// Writes `context<TAB>reference<TAB>hypothesis` lines.
pub fn write_generations(path: impl AsRef<Path>, rows: &[GenerationRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path.as_ref())?);
    for r in rows {
        writeln!(f, "{}\t{}\t{}", r.context, r.reference, r.hypothesis)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_generations(path: impl AsRef<Path>) -> Result<Vec<GenerationRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", parts.len()),
            });
        }
        rows.push(GenerationRow {
            context: parts[0].to_string(),
            reference: parts[1].to_string(),
            hypothesis: parts[2].to_string(),
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no generations", path.display())));
    }
    Ok(rows)
}

/// Next-token scorer backed by a fixed function of the prefix, for tests
/// and examples.
pub struct FnStepModel<F> {
    pub vocab: usize,
    pub f: F,
}

impl<F> StepModel for FnStepModel<F>
where
    F: Fn(&[usize], &[usize]) -> Vec<f32>,
{
    type Session = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn begin(&self, context: &[usize]) -> Result<Vec<usize>> {
        Ok(context.to_vec())
    }

    fn next_logits(&self, session: &Vec<usize>, prefixes: &[&[usize]]) -> Result<Vec<Vec<f32>>> {
        Ok(prefixes.iter().map(|p| (self.f)(session, p)).collect())
    }
}
