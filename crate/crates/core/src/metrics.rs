//! Corpus-level diversity, overlap and calibration statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedPair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::numerics::{softmax, Graph};

/// Training-set count below which a token counts as low-frequency.
pub const LOW_FREQ_THRESHOLD: u64 = 100;

/// Share of training-token mass covered by the high-frequency set.
pub const HIGH_FREQ_MASS: f64 = 0.4;

fn ngrams<'a, S: AsRef<str>>(tokens: &'a [S], n: usize) -> impl Iterator<Item = Vec<&'a str>> + 'a {
    tokens.windows(n).map(|w| w.iter().map(AsRef::as_ref).collect())
}

fn ngram_counts<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> Result<HashMap<Vec<&str>, u64>> {
    if n == 0 {
        return Err(Error::config("metrics.n", "n-gram order must be positive"));
    }
    let mut counts = HashMap::new();
    for r in responses {
        for g in ngrams(r, n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::NoNgrams);
    }
    Ok(counts)
}

/// Distinct n-grams over total n-grams, pooled over the corpus.
pub fn distinct_n<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> Result<f64> {
    let counts = ngram_counts(responses, n)?;
    let total: u64 = counts.values().sum();
    Ok(counts.len() as f64 / total as f64)
}

/// Entropy (nats) of the pooled n-gram distribution.
pub fn entropy_n<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> Result<f64> {
    let counts = ngram_counts(responses, n)?;
    let total = counts.values().sum::<u64>() as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum())
}

/// Fraction of generated tokens whose training count is below `threshold`.
pub fn low_frequency_ratio<S: AsRef<str>>(
    responses: &[Vec<S>],
    train_counts: &HashMap<String, u64>,
    threshold: u64,
) -> Result<f64> {
    let mut total = 0usize;
    let mut low = 0usize;
    for r in responses {
        for t in r {
            total += 1;
            if train_counts.get(t.as_ref()).copied().unwrap_or(0) < threshold {
                low += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("no generated tokens".into()));
    }
    Ok(low as f64 / total as f64)
}

/// Corpus BLEU up to order `max_n` with uniform weights and brevity penalty.
pub fn bleu_n<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>], max_n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::config("metrics.bleu_n", "order must be positive"));
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput("no hypotheses".into()));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let mut matched = 0u64;
        let mut total = 0u64;
        for (h, r) in hypotheses.iter().zip(references) {
            let mut rc: HashMap<Vec<&str>, u64> = HashMap::new();
            for g in ngrams(r, n) {
                *rc.entry(g).or_insert(0) += 1;
            }
            let mut hc: HashMap<Vec<&str>, u64> = HashMap::new();
            for g in ngrams(h, n) {
                *hc.entry(g).or_insert(0) += 1;
            }
            for (g, c) in hc {
                total += c;
                matched += c.min(rc.get(&g).copied().unwrap_or(0));
            }
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Shortest prefix of tokens, by descending count (ties by token), whose
/// counts reach `mass` of the total.
pub fn high_frequency_set(counts: &HashMap<String, u64>, mass: f64) -> HashSet<String> {
    let mut items: Vec<(&String, u64)> = counts.iter().map(|(t, &c)| (t, c)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let total: u64 = items.iter().map(|x| x.1).sum();
    let mut covered = 0u64;
    let mut set = HashSet::new();
    for (t, c) in items {
        if total == 0 || covered as f64 >= mass * total as f64 {
            break;
        }
        covered += c;
        set.insert(t.clone());
    }
    set
}

/// Equal-width histogram of probabilities over [0, 1]; the last bin is closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
    /// Sum of every recorded probability.
    pub sum: f64,
}

impl ConfidenceHistogram {
    pub fn new(bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width <= 1.0) {
            return Err(Error::config("metrics.bin_width", "must lie in (0, 1]"));
        }
        let bins = (1.0 / bin_width - 1e-9).ceil() as usize;
        Ok(ConfidenceHistogram {
            bin_width,
            counts: vec![0; bins],
            sum: 0.0,
        })
    }

    pub fn bin_index(&self, p: f64) -> usize {
        ((p / self.bin_width + 1e-9).floor().max(0.0) as usize).min(self.counts.len() - 1)
    }

    pub fn add(&mut self, p: f64) {
        let i = self.bin_index(p);
        self.counts[i] += 1;
        self.sum += p;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.total().max(1) as f64
    }

    /// Share of recorded probabilities at or above `p`.
    pub fn mass_at_or_above(&self, p: f64) -> f64 {
        let from = self.bin_index(p);
        self.counts[from..].iter().sum::<u64>() as f64 / self.total().max(1) as f64
    }

    /// `lower<TAB>count` rows for plotting.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin_lower\tcount\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:.4}\t{}\n", i as f64 * self.bin_width, c));
        }
        s
    }
}

/// Teacher-forced probability the dialogue decoder assigns to each reference
/// token that belongs to the high-frequency set.
pub fn confidence_histogram(
    model: &Seq2Seq<f32>,
    pairs: &[EncodedPair],
    vocab: &Vocabulary,
    bin_width: f64,
    batch_size: usize,
) -> Result<ConfidenceHistogram> {
    let mut hist = ConfidenceHistogram::new(bin_width)?;
    let high = high_frequency_set(&vocab.frequencies(), HIGH_FREQ_MASS);
    if high.is_empty() {
        return Err(Error::EmptyInput("high-frequency set is empty".into()));
    }
    let high_ids: HashSet<usize> = high.iter().map(|t| vocab.id(t)).collect();
    let v = model.config().vocab_size;
    for b in crate::data::sequential_batches(pairs, batch_size.max(1)) {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &b.src, &b.dec_in)?;
        let logits = g.value(out.dialogue).data();
        let pad = b.dec_out.pad_mask();
        for (r, &t) in b.dec_out.ids.iter().enumerate() {
            if pad[r] || !high_ids.contains(&t) {
                continue;
            }
            let p = softmax(&logits[r * v..(r + 1) * v], 1.0)?;
            hist.add(p[t] as f64);
        }
    }
    Ok(hist)
}

/// Share of generated tokens per training-frequency bin `[e_i, e_{i+1})`.
/// Tokens outside every bin land in `overflow`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RareBins {
    pub edges: Vec<u64>,
    pub fractions: Vec<f64>,
    pub overflow: f64,
}

impl RareBins {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin\tfraction\n");
        for (w, f) in self.edges.windows(2).zip(&self.fractions) {
            s.push_str(&format!("[{},{})\t{:.6}\n", w[0], w[1], f));
        }
        s.push_str(&format!("overflow\t{:.6}\n", self.overflow));
        s
    }
}

pub fn rare_word_bins<S: AsRef<str>>(
    responses: &[Vec<S>],
    train_counts: &HashMap<String, u64>,
    edges: &[u64],
) -> Result<RareBins> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "metrics.rare_edges",
            "need at least two strictly increasing edges",
        ));
    }
    let mut counts = vec![0u64; edges.len() - 1];
    let mut overflow = 0u64;
    let mut total = 0u64;
    for r in responses {
        for t in r {
            total += 1;
            let c = train_counts.get(t.as_ref()).copied().unwrap_or(0);
            if c < edges[0] || c >= edges[edges.len() - 1] {
                overflow += 1;
            } else {
                counts[edges.partition_point(|&e| e <= c) - 1] += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("no generated tokens".into()));
    }
    let n = total as f64;
    Ok(RareBins {
        edges: edges.to_vec(),
        fractions: counts.iter().map(|&c| c as f64 / n).collect(),
        overflow: overflow as f64 / n,
    })
}

/// Scores for one set of generations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dist: BTreeMap<String, f64>,
    pub ent: BTreeMap<String, f64>,
    pub lf: f64,
    pub bleu: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence_hist: Option<ConfidenceHistogram>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rare_bins: Option<RareBins>,
}

impl MetricsReport {
    /// Scalar rows in report order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = Vec::new();
        for (k, v) in &self.dist {
            rows.push((format!("dist_{k}"), *v));
        }
        for (k, v) in &self.ent {
            rows.push((format!("ent_{k}"), *v));
        }
        rows.push(("lf".into(), self.lf));
        for (k, v) in &self.bleu {
            rows.push((format!("bleu_{k}"), *v));
        }
        for (name, v) in [
            ("perplexity", self.perplexity),
            ("accuracy", self.accuracy),
            ("aux_accuracy", self.aux_accuracy),
        ] {
            if let Some(v) = v {
                rows.push((name.into(), v));
            }
        }
        if let Some(h) = &self.confidence_hist {
            rows.push(("confidence_mean".into(), h.mean()));
            rows.push(("confidence_scored".into(), h.total() as f64));
        }
        rows
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows().into_iter().find(|(n, _)| n == name).map(|x| x.1)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (n, v) in self.rows() {
            s.push_str(&format!("{n}\t{v:.6}\n"));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, tsv: impl AsRef<Path>, json: impl AsRef<Path>) -> Result<()> {
        fs::File::create(tsv.as_ref())?.write_all(self.to_tsv().as_bytes())?;
        fs::write(json.as_ref(), self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Diversity and overlap scores for generated responses against references.
/// Diversity scores of a corpus without n-grams are reported as 0.
pub fn generation_report(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    train_counts: &HashMap<String, u64>,
) -> Result<MetricsReport> {
    let mut rep = MetricsReport::default();
    for n in 1..=2 {
        rep.dist.insert(n.to_string(), or_zero(distinct_n(hypotheses, n))?);
        rep.ent.insert(n.to_string(), or_zero(entropy_n(hypotheses, n))?);
    }
    rep.lf = or_zero(low_frequency_ratio(hypotheses, train_counts, LOW_FREQ_THRESHOLD))?;
    for n in 2..=4 {
        rep.bleu.insert(n.to_string(), bleu_n(hypotheses, references, n)?);
    }
    Ok(rep)
}

fn or_zero(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::NoNgrams) | Err(Error::EmptyInput(_)) => Ok(0.0),
        other => other,
    }
}
