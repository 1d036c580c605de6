//! Template-generated dialogue corpus with several valid responses per
//! context and a pool of generic replies shared by every context.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DialoguePair;
use crate::error::{Error, Result};

/// Each context template comes with its own set of response templates.
const TEMPLATE_SETS: &[(&str, &[&str])] = &[
    (
        "do you like the {item} ?",
        &[
            "yes , the {item} is {adj} .",
            "sure , my {item} is really {adj} .",
            "never , that {item} looks {adj} to me .",
        ],
    ),
    (
        "what about the {item} ?",
        &[
            "the {item} ? it is {adj} !",
            "well , every {item} here is {adj} .",
            "maybe the {adj} {item} is better .",
        ],
    ),
    (
        "have you seen my {item} ?",
        &[
            "your {item} is under the {adj} table .",
            "no , but the {adj} {item} was here .",
            "yesterday your {item} was {adj} .",
        ],
    ),
    (
        "tell me about the {item} .",
        &[
            "that {item} is very {adj} .",
            "people say the {item} is {adj} .",
            "honestly , a {adj} {item} is rare .",
        ],
    ),
];

const GENERIC_RESPONSES: &[&str] = &["i do n't know .", "i am not sure ."];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub items: usize,
    pub adjectives: usize,
    /// Template responses attached to each context, at most 3.
    pub responses_per_context: usize,
    /// Training copies of each template response.
    pub copies_per_response: usize,
    /// Generic replies added per context to the training pairs.
    pub generic_per_context: usize,
    /// One held-out pair is drawn for every `valid_every`-th context.
    pub valid_every: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            items: 250,
            adjectives: 30,
            responses_per_context: 3,
            copies_per_response: 1,
            generic_per_context: 2,
            valid_every: 5,
            seed: 0,
        }
    }
}

/// A context and every response it accepts.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthContext {
    pub context: String,
    pub responses: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub contexts: Vec<SynthContext>,
    pub train: Vec<DialoguePair>,
    pub valid: Vec<DialoguePair>,
}

fn pseudo_words(n: usize, syllables: usize, rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn fill(template: &str, item: &str, adj: &str) -> String {
    template.replace("{item}", item).replace("{adj}", adj)
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.items == 0 || cfg.adjectives == 0 {
        return Err(Error::config("synth.items", "need at least one item and adjective"));
    }
    if cfg.responses_per_context == 0 || cfg.responses_per_context > 3 {
        return Err(Error::config("synth.responses_per_context", "must lie in 1..=3"));
    }
    if cfg.copies_per_response == 0 {
        return Err(Error::config("synth.copies_per_response", "must be positive"));
    }
    if cfg.valid_every == 0 {
        return Err(Error::config("synth.valid_every", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = HashSet::new();
    let items = pseudo_words(cfg.items, 3, &mut rng, &mut taken);
    let adjectives = pseudo_words(cfg.adjectives, 2, &mut rng, &mut taken);

    let mut contexts = Vec::new();
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for item in &items {
        for (ct, templates) in TEMPLATE_SETS {
            let adj = adjectives.choose(&mut rng).unwrap();
            let mut responses: Vec<String> = templates[..cfg.responses_per_context]
                .iter()
                .map(|t| fill(t, item, adj))
                .collect();
            let context = fill(ct, item, adj);
            let mut pool: Vec<String> = Vec::new();
            for r in &responses {
                pool.extend(std::iter::repeat(r.clone()).take(cfg.copies_per_response));
            }
            for _ in 0..cfg.generic_per_context {
                pool.push(GENERIC_RESPONSES.choose(&mut rng).unwrap().to_string());
            }
            for r in &pool {
                train.push(DialoguePair::new(&context, r));
            }
            if contexts.len() % cfg.valid_every == 0 {
                let r = &pool[rng.gen_range(0..pool.len())];
                valid.push(DialoguePair::new(&context, r));
            }
            responses.extend(GENERIC_RESPONSES.iter().map(|s| s.to_string()));
            contexts.push(SynthContext { context, responses });
        }
    }
    train.shuffle(&mut rng);
    Ok(SynthCorpus { contexts, train, valid })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_corpus_shape() {
        let c = synth_corpus(&SynthConfig::default()).unwrap();
        assert_eq!(c.contexts.len(), 1000);
        assert_eq!(c.train.len(), 5000);
        assert_eq!(c.valid.len(), 200);
        assert!(c.contexts.iter().all(|x| x.responses.len() >= 3));
        let distinct: HashSet<&str> = c.contexts.iter().map(|x| x.context.as_str()).collect();
        assert_eq!(distinct.len(), 1000);
    }

    #[test]
    fn seeded() {
        let cfg = SynthConfig {
            items: 10,
            ..Default::default()
        };
        assert_eq!(synth_corpus(&cfg).unwrap(), synth_corpus(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(synth_corpus(&cfg).unwrap().train, synth_corpus(&other).unwrap().train);
    }
}
