//! Trains CE and AdaLabel on the synthetic corpus and prints confidence,
//! diversity and decoder accuracy side by side.
//!
//! cargo run --release --example desk_compare -- [steps] [seed]

use std::time::Instant;

use adalab_core::adalabel::AdaLabelConfig;
use adalab_core::data::{build_vocab, encode_pairs, tokenize};
use adalab_core::decode::{decode_all, DecodeConfig};
use adalab_core::metrics::{confidence_histogram, distinct_n};
use adalab_core::model::{ModelConfig, Seq2Seq};
use adalab_core::synth::{synth_corpus, SynthConfig};
use adalab_core::train::{evaluate_held_out, train, Objective, TrainConfig, Trainer};

fn main() -> adalab_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map_or(600, |s| s.parse().expect("steps"));
    let seed: u64 = args.get(2).map_or(0, |s| s.parse().expect("seed"));
    let lr: f64 = args.get(3).map_or(1e-3, |s| s.parse().expect("lr"));

    let env = |k: &str, d: usize| std::env::var(k).ok().map_or(d, |v| v.parse().expect(k));
    let corpus = synth_corpus(&SynthConfig {
        copies_per_response: env("COPIES", 1),
        generic_per_context: env("GENERIC", 2),
        ..Default::default()
    })?;
    let vocab = build_vocab(&corpus.train, 1, None)?;
    let train_enc = encode_pairs(&corpus.train, &vocab);
    let valid_enc = encode_pairs(&corpus.valid, &vocab);
    let contexts: Vec<Vec<usize>> = corpus
        .contexts
        .iter()
        .step_by(5)
        .map(|c| vocab.encode(&tokenize(&c.context)))
        .collect();

    for objective in [Objective::Ce, Objective::Adalabel] {
        let t0 = Instant::now();
        let tc = TrainConfig {
            objective,
            lr,
            max_steps: steps,
            eval_every: env("EVAL", steps as usize) as u64,
            seed,
            ..Default::default()
        };
        let model = Seq2Seq::new(ModelConfig::desk(vocab.len()), seed)?;
        let mut trainer = Trainer::new(model, tc, AdaLabelConfig::default(), train_enc.clone())?;
        let out = train(&mut trainer, &valid_enc, &vocab, |r| {
            if std::env::var("VERBOSE").is_ok() {
                eprintln!("{}", r.tsv_row());
            }
        })?;
        let model = out.last.model()?;
        let scores = evaluate_held_out(&model, &valid_enc, 64)?;
        let hist = confidence_histogram(&model, &valid_enc, &vocab, 0.05, 64)?;
        let hyps = decode_all(&model, &contexts, &DecodeConfig { max_len: 20, ..Default::default() })?;
        let words: Vec<Vec<String>> = hyps.iter().map(|h| vocab.decode(&h.tokens)).collect();
        println!(
            "{objective}\tsecs={:.1}\tppl={:.3}\tacc={:.4}\taux_acc={:.4}\tconf={:.4}\ttop={:.4}\td1={:.4}\td2={:.4}",
            t0.elapsed().as_secs_f64(),
            scores.perplexity,
            scores.token_accuracy,
            scores.aux_accuracy,
            hist.mean(),
            hist.mass_at_or_above(0.95),
            distinct_n(&words, 1).unwrap_or(0.0),
            distinct_n(&words, 2).unwrap_or(0.0),
        );
        for w in words.iter().take(4) {
            println!("  {}", w.join(" "));
        }
    }
    Ok(())
}
