//! Corpus ingestion, vocabulary construction and batching.
//!
//! The corpus format is one dialogue pair per line, `context<TAB>response`,
//! with multi-turn contexts separated by the literal ` __sep__ `. Tokens are
//! lowercased and split on whitespace.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;
pub const NUM_RESERVED: usize = 5;

pub const SEP_TOKEN: &str = "__sep__";
const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>", SEP_TOKEN];

/// Pairs whose context or response exceed this many tokens are removed.
pub const MAX_PAIR_TOKENS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialoguePair {
    pub context: Vec<String>,
    pub response: Vec<String>,
}

impl DialoguePair {
    pub fn new(context: &str, response: &str) -> Self {
        DialoguePair {
            context: tokenize(context),
            response: tokenize(response),
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub pairs: Vec<DialoguePair>,
    /// Pairs removed for exceeding [`MAX_PAIR_TOKENS`].
    pub dropped_long: usize,
    /// Lines rejected as malformed (no TAB, empty side).
    pub rejected: Vec<usize>,
}

/// Parses one corpus line; `None` means malformed.
pub fn parse_line(line: &str) -> Option<DialoguePair> {
    let (ctx, resp) = line.split_once('\t')?;
    let pair = DialoguePair::new(ctx, resp);
    if pair.context.is_empty() || pair.response.is_empty() {
        return None;
    }
    Some(pair)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut corpus = Corpus::default();
    let mut saw_line = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        saw_line = true;
        match parse_line(&line) {
            Some(pair) => {
                if pair.context.len() > MAX_PAIR_TOKENS || pair.response.len() > MAX_PAIR_TOKENS {
                    corpus.dropped_long += 1;
                } else {
                    corpus.pairs.push(pair);
                }
            }
            None => {
                log::warn!("{}:{}: rejected line (expected context<TAB>response)", path.display(), i + 1);
                corpus.rejected.push(i + 1);
            }
        }
    }
    if !saw_line {
        return Err(Error::EmptyInput(format!("corpus {} is empty", path.display())));
    }
    if corpus.dropped_long > 0 {
        log::info!("{}: dropped {} over-long pairs", path.display(), corpus.dropped_long);
    }
    Ok(corpus)
}

pub fn write_corpus(path: impl AsRef<Path>, pairs: &[DialoguePair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.context.join(" "));
        out.push('\t');
        out.push_str(&p.response.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Raw token frequencies over contexts and responses (separators excluded).
pub fn token_counts(pairs: &[DialoguePair]) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for p in pairs {
        for t in p.context.iter().chain(&p.response) {
            if t != SEP_TOKEN {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "VocabRepr", try_from = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    freq: Vec<u64>,
    index: HashMap<String, usize>,
}

/// Serialized form: regular tokens with their counts, in id order.
#[derive(Clone, Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    freq: Vec<u64>,
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            tokens: v.tokens[NUM_RESERVED..].to_vec(),
            freq: v.freq[NUM_RESERVED..].to_vec(),
        }
    }
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        if r.tokens.len() != r.freq.len() {
            return Err(Error::VocabMismatch("token and count lists differ in length".into()));
        }
        Vocabulary::from_entries(r.tokens.into_iter().zip(r.freq).collect())
    }
}

impl Vocabulary {
    /// Builds from `(token, count)` entries already in id order.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut freq = vec![0; NUM_RESERVED];
        for (t, c) in entries {
            tokens.push(t);
            freq.push(c);
        }
        let mut v = Vocabulary {
            tokens,
            freq,
            index: HashMap::new(),
        };
        v.rebuild_index()?;
        Ok(v)
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.index.insert(t.clone(), i).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token `{}`", t)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Training-corpus count for a token id (0 for reserved ids).
    pub fn freq(&self, id: usize) -> u64 {
        self.freq[id]
    }

    pub fn frequencies(&self) -> HashMap<String, u64> {
        self.tokens
            .iter()
            .zip(&self.freq)
            .skip(NUM_RESERVED)
            .map(|(t, &c)| (t.clone(), c))
            .collect()
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// Non-reserved tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// Writes one token per line; line `i` holds id `i + NUM_RESERVED`.
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for t in self.regular_tokens() {
            writeln!(f, "{}", t)?;
        }
        Ok(())
    }

    /// Reads a token-per-line file; counts are unknown and set to 0.
    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let entries = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| (l.to_string(), 0))
            .collect();
        Self::from_entries(entries)
    }
}

pub fn build_vocab(pairs: &[DialoguePair], min_freq: u64, max_size: Option<usize>) -> Result<Vocabulary> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("cannot build a vocabulary from no pairs".into()));
    }
    let counts = token_counts(pairs);
    let mut entries: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !RESERVED_TOKENS.contains(&t.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(max) = max_size {
        entries.truncate(max);
    }
    Vocabulary::from_entries(entries)
}

/// Row-major `[batch, len]` id matrix padded with [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedIds {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl PaddedIds {
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; rows.len() * len];
        for (r, row) in rows.iter().enumerate() {
            ids[r * len..r * len + row.len()].copy_from_slice(row);
        }
        PaddedIds {
            ids,
            batch: rows.len(),
            len,
            lengths: rows.iter().map(Vec::len).collect(),
        }
    }

    /// True at padded positions.
    pub fn pad_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.ids.len()];
        for (r, &l) in self.lengths.iter().enumerate() {
            for p in l..self.len {
                m[r * self.len + p] = true;
            }
        }
        m
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.len..r * self.len + self.lengths[r]]
    }
}

/// Encoder input, BOS-shifted decoder input and EOS-terminated decoder output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub src: PaddedIds,
    pub dec_in: PaddedIds,
    pub dec_out: PaddedIds,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.src.batch
    }

    pub fn is_empty(&self) -> bool {
        self.src.batch == 0
    }

    /// Number of loss-bearing (non-PAD) target positions.
    pub fn target_tokens(&self) -> usize {
        self.dec_out.lengths.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

pub fn encode_pairs(pairs: &[DialoguePair], vocab: &Vocabulary) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| EncodedPair {
            src: vocab.encode(&p.context),
            tgt: vocab.encode(&p.response),
        })
        .collect()
}

pub fn collate(pairs: &[&EncodedPair]) -> TokenBatch {
    let src: Vec<Vec<usize>> = pairs.iter().map(|p| p.src.clone()).collect();
    let dec_in: Vec<Vec<usize>> = pairs
        .iter()
        .map(|p| std::iter::once(BOS).chain(p.tgt.iter().copied()).collect())
        .collect();
    let dec_out: Vec<Vec<usize>> = pairs
        .iter()
        .map(|p| p.tgt.iter().copied().chain(std::iter::once(EOS)).collect())
        .collect();
    TokenBatch {
        src: PaddedIds::from_rows(&src),
        dec_in: PaddedIds::from_rows(&dec_in),
        dec_out: PaddedIds::from_rows(&dec_out),
    }
}

/// Seeded shuffle followed by fixed-size chunking (last batch may be short).
pub fn make_batches(encoded: &[EncodedPair], batch_size: usize, seed: u64) -> Vec<TokenBatch> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|c| collate(&c.iter().map(|&i| &encoded[i]).collect::<Vec<_>>()))
        .collect()
}

/// In-order batches without shuffling, for evaluation.
pub fn sequential_batches(encoded: &[EncodedPair], batch_size: usize) -> Vec<TokenBatch> {
    encoded
        .chunks(batch_size.max(1))
        .map(|c| collate(&c.iter().collect::<Vec<_>>()))
        .collect()
}
