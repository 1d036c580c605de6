//! `adalab`: train, generate, evaluate and analyze adaptive label smoothing
//! dialogue models.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration, 3 divergence,
//! 4 vocabulary mismatch, 5 malformed input.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use adalab_core::data::{build_vocab, encode_pairs, load_corpus, token_counts, tokenize, write_corpus, Vocabulary};
use adalab_core::decode::{decode_all, read_generations, write_generations, DecodeConfig, GenerationRow, Scheme};
use adalab_core::metrics::{confidence_histogram, generation_report, rare_word_bins};
use adalab_core::model::Seq2Seq;
use adalab_core::synth::{synth_corpus, SynthConfig};
use adalab_core::train::{evaluate_held_out, train, Checkpoint, Trainer, STEP_LOG_HEADER};
use adalab_core::{Error, Result};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "adalab", version, about = "Adaptive label smoothing for dialogue generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Decode responses for every context of a corpus.
    Generate(GenerateArgs),
    /// Score a generations file.
    Evaluate(EvaluateArgs),
    /// Confidence histogram and rare-word bins for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Write the synthetic multi-reference corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// ce, ls, fl, cp, adalabel, or an ablation such as fixed_epsilon(0.1)
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Greedy,
    Beam,
    Topk,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "greedy")]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 5)]
    width: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Rank beam hypotheses by summed rather than per-token log-probability.
    #[arg(long)]
    no_length_norm: bool,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Vocabulary file that must match the checkpoint's.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    generations: PathBuf,
    #[arg(long)]
    train_corpus: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Checkpoint for perplexity, accuracy and the confidence histogram.
    #[arg(long)]
    against: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    bin_width: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,100,1000,10000")]
    edges: Vec<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Hypotheses for the rare-word bins; greedy decoding when absent.
    #[arg(long)]
    generations: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    bin_width: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,100,1000,10000")]
    edges: Vec<u64>,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 250)]
    items: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig { .. } | Error::LeakageRisk(_) | Error::UnknownMode(_) | Error::InvalidEpsilon(_) => 2,
        Error::Divergence { .. } => 3,
        Error::VocabMismatch(_) => 4,
        Error::Malformed { .. } => 5,
        _ => 1,
    }
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("ADALAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    if let Some(o) = a.objective {
        cfg.train.objective = o.parse().map_err(|e: Error| Error::config("train.objective", e.to_string()))?;
    }
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    if let Some(n) = a.eval_every {
        cfg.train.eval_every = n;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(p) = a.train {
        cfg.data.train = Some(p);
    }
    if let Some(p) = a.valid {
        cfg.data.valid = Some(p);
    }
    cfg.resolve()?;

    let train_path = cfg.data.train.clone().expect("resolved");
    let train_corpus = load_corpus(&train_path)?;
    let vocab = build_vocab(&train_corpus.pairs, cfg.data.min_freq, cfg.data.max_vocab)?;
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = vocab.len();
    } else if cfg.model.vocab_size != vocab.len() {
        return Err(Error::config(
            "model.vocab_size",
            format!("{} but the corpus vocabulary has {}", cfg.model.vocab_size, vocab.len()),
        ));
    }
    cfg.model.validate()?;

    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json()?)?;
    vocab.write_file(dir.join("vocab.txt"))?;

    let train_enc = encode_pairs(&train_corpus.pairs, &vocab);
    let valid_enc = match &cfg.data.valid {
        Some(p) => encode_pairs(&load_corpus(p)?.pairs, &vocab),
        None => train_enc.clone(),
    };
    let model = Seq2Seq::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.adalabel.clone(), train_enc)?;

    let mut log = std::io::BufWriter::new(fs::File::create(dir.join("steps.tsv"))?);
    writeln!(log, "{STEP_LOG_HEADER}")?;
    let outcome = train(&mut trainer, &valid_enc, &vocab, |r| {
        let _ = writeln!(log, "{}", r.tsv_row());
        let _ = log.flush();
    });
    drop(log);
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ Error::Divergence { .. }) => {
            if let Error::Divergence { step, detail } = &e {
                fs::write(dir.join("divergence.txt"), format!("step {step}\n{detail}"))?;
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    outcome.best.save(dir.join("checkpoint.bin"))?;
    let best = outcome.best.best.expect("evaluated");
    println!(
        "trained {} steps; best ppl {:.4} acc {:.4} at step {}; wrote {}",
        outcome.last.step,
        best.perplexity,
        best.accuracy,
        best.step,
        dir.display()
    );
    Ok(())
}

fn check_vocab_file(ck: &Checkpoint, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        let v = Vocabulary::read_file(p)?;
        if v.regular_tokens() != ck.vocab.regular_tokens() {
            return Err(Error::VocabMismatch(format!(
                "{} ({} tokens) differs from the checkpoint vocabulary ({} tokens)",
                p.display(),
                v.len(),
                ck.vocab.len()
            )));
        }
    }
    Ok(())
}

fn check_overlap(vocab: &Vocabulary, texts: &[Vec<String>], what: &Path) -> Result<()> {
    let total: usize = texts.iter().map(Vec::len).sum();
    let known: usize = texts.iter().flatten().filter(|t| vocab.contains(t)).count();
    if total > 0 && known == 0 {
        return Err(Error::VocabMismatch(format!(
            "no token of {} is in the checkpoint vocabulary",
            what.display()
        )));
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    check_vocab_file(&ck, a.vocab.as_deref())?;
    let corpus = load_corpus(&a.corpus)?;
    let contexts: Vec<Vec<String>> = corpus.pairs.iter().map(|p| p.context.clone()).collect();
    check_overlap(&ck.vocab, &contexts, &a.corpus)?;
    let scheme = match a.scheme {
        SchemeArg::Greedy => Scheme::Greedy,
        SchemeArg::Beam => Scheme::Beam {
            width: a.width,
            length_norm: !a.no_length_norm,
        },
        SchemeArg::Topk => Scheme::TopK { k: a.k },
    };
    let dcfg = DecodeConfig {
        scheme,
        max_len: a.max_len,
        seed: a.seed,
    };
    dcfg.validate()?;
    let model = ck.model()?;
    let ids: Vec<Vec<usize>> = contexts.iter().map(|c| ck.vocab.encode(c)).collect();
    let hyps = decode_all(&model, &ids, &dcfg)?;
    let rows: Vec<GenerationRow> = corpus
        .pairs
        .iter()
        .zip(&hyps)
        .map(|(p, h)| GenerationRow {
            context: p.context.join(" "),
            reference: p.response.join(" "),
            hypothesis: ck.vocab.decode(&h.tokens).join(" "),
        })
        .collect();
    if let Some(parent) = a.output.parent() {
        if !parent.as_os_str().is_empty() {
            create_dir(parent)?;
        }
    }
    write_generations(&a.output, &rows)?;
    println!("generated {} responses", rows.len());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let gens = read_generations(&a.generations)?;
    let train_corpus = load_corpus(&a.train_corpus)?;
    let counts = token_counts(&train_corpus.pairs);
    let hyps: Vec<Vec<String>> = gens.iter().map(|g| tokenize(&g.hypothesis)).collect();
    let refs: Vec<Vec<String>> = gens.iter().map(|g| tokenize(&g.reference)).collect();
    let mut report = generation_report(&hyps, &refs, &counts)?;
    report.rare_bins = match rare_word_bins(&hyps, &counts, &a.edges) {
        Ok(b) => Some(b),
        Err(Error::EmptyInput(_)) => None,
        Err(e) => return Err(e),
    };
    if let Some(ck_path) = &a.against {
        let ck = Checkpoint::load(ck_path)?;
        let pairs: Vec<_> = gens
            .iter()
            .map(|g| adalab_core::data::DialoguePair::new(&g.context, &g.reference))
            .filter(|p| !p.context.is_empty() && !p.response.is_empty())
            .collect();
        let contexts: Vec<Vec<String>> = pairs.iter().map(|p| p.context.clone()).collect();
        check_overlap(&ck.vocab, &contexts, &a.generations)?;
        let enc = encode_pairs(&pairs, &ck.vocab);
        let model = ck.model()?;
        let scores = evaluate_held_out(&model, &enc, ck.train_cfg.eval_batch_size)?;
        report.perplexity = Some(scores.perplexity);
        report.accuracy = Some(scores.token_accuracy);
        report.aux_accuracy = Some(scores.aux_accuracy);
        report.confidence_hist = Some(confidence_histogram(&model, &enc, &ck.vocab, a.bin_width, 64)?);
    }
    create_dir(&a.output_dir)?;
    report.write(a.output_dir.join("report.tsv"), a.output_dir.join("report.json"))?;
    if let Some(h) = &report.confidence_hist {
        fs::write(a.output_dir.join("confidence_hist.tsv"), h.to_tsv())?;
    }
    if let Some(b) = &report.rare_bins {
        fs::write(a.output_dir.join("rare_bins.tsv"), b.to_tsv())?;
    }
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let contexts: Vec<Vec<String>> = corpus.pairs.iter().map(|p| p.context.clone()).collect();
    check_overlap(&ck.vocab, &contexts, &a.corpus)?;
    let model = ck.model()?;
    let enc = encode_pairs(&corpus.pairs, &ck.vocab);
    let hist = confidence_histogram(&model, &enc, &ck.vocab, a.bin_width, 64)?;

    let hyps: Vec<Vec<String>> = match &a.generations {
        Some(g) => read_generations(g)?.iter().map(|r| tokenize(&r.hypothesis)).collect(),
        None => {
            let dcfg = DecodeConfig {
                max_len: a.max_len,
                seed: a.seed,
                ..Default::default()
            };
            let ids: Vec<Vec<usize>> = contexts.iter().map(|c| ck.vocab.encode(c)).collect();
            decode_all(&model, &ids, &dcfg)?
                .iter()
                .map(|h| ck.vocab.decode(&h.tokens))
                .collect()
        }
    };
    let bins = rare_word_bins(&hyps, &ck.vocab.frequencies(), &a.edges)?;
    create_dir(&a.output_dir)?;
    fs::write(a.output_dir.join("confidence_hist.tsv"), hist.to_tsv())?;
    fs::write(a.output_dir.join("rare_bins.tsv"), bins.to_tsv())?;
    println!("scored tokens\t{}", hist.total());
    println!("mean confidence\t{:.6}", hist.mean());
    println!("top-bin mass\t{:.6}", hist.mass_at_or_above(0.95));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let corpus = synth_corpus(&SynthConfig {
        items: a.items,
        seed: a.seed,
        ..Default::default()
    })?;
    create_dir(&a.output_dir)?;
    write_corpus(a.output_dir.join("train.tsv"), &corpus.train)?;
    write_corpus(a.output_dir.join("valid.tsv"), &corpus.valid)?;
    println!(
        "wrote {} training and {} held-out pairs over {} contexts",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.contexts.len()
    );
    Ok(())
}
