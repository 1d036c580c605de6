//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! `ADALAB_ACCEPTANCE=1,4,9` restricts the run to the listed criteria.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use adalab_core::adalabel::{
    adalabel_step, adaption_factor, build_auxiliary_distribution, mix_targets, position_target, random_non_target,
    AdaLabelConfig, AuxSource, EpsilonRule, TargetRecipe,
};
use adalab_core::baselines::{ls_target, BaselineConfig};
use adalab_core::data::{
    build_vocab, collate, encode_pairs, load_corpus, tokenize, EncodedPair, PaddedIds, BOS, NUM_RESERVED,
};
use adalab_core::decode::{beam_search, decode_all, greedy, top_k_sample, DecodeConfig, FnStepModel};
use adalab_core::metrics::{
    bleu_n, confidence_histogram, distinct_n, entropy_n, low_frequency_ratio, rare_word_bins,
    ConfidenceHistogram,
};
use adalab_core::model::{ModelConfig, Seq2Seq};
use adalab_core::numerics::Graph;
use adalab_core::train::{
    evaluate_held_out, loss_from_targets, prepare_targets, train, Checkpoint, DialogueTarget, Objective,
    TrainConfig, Trainer,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---- 1: target construction invariants

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sharp = rng.gen_range(0.2..6.0);
    let raw: Vec<f64> = (0..n).map(|_| (rng.gen_range(-1.0..1.0f64) * sharp).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 10_000;
    let mut worst_margin = f64::INFINITY;
    for d in 0..draws {
        let vocab = rng.gen_range(3..60);
        let target = rng.gen_range(0..vocab);
        let eta = rng.gen_range(0.01..0.5);
        let p = random_simplex(&mut rng, vocab);
        let v = if d % 2 == 0 {
            let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let cfg = AdaLabelConfig {
                trunc_low: rng.gen_range(1..3.min(vocab - 1) + 1),
                trunc_high: rng.gen_range(2..vocab + 5),
                ..Default::default()
            };
            let cfg = AdaLabelConfig {
                trunc_high: cfg.trunc_high.max(cfg.trunc_low),
                ..cfg
            };
            build_auxiliary_distribution(&logits, target, &cfg).map_err(|e| e.to_string())?
        } else {
            random_non_target(vocab, target, &mut rng)
        };
        let f = adaption_factor(&p, target, &v, eta);
        let q = mix_targets(target, &v, f.epsilon).map_err(|e| e.to_string())?;
        let eps = f.epsilon;
        let best_other = q
            .dist
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != target)
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = q.dist.iter().sum();
        check(eps >= f.p_max.max(f.lambda) - 1e-15, || format!("draw {d}: eps {eps} below floor"))?;
        check((sum - 1.0).abs() <= 1e-6, || format!("draw {d}: sum {sum}"))?;
        check(q.dist[target] == eps, || format!("draw {d}: q'(y) != eps"))?;
        check(eps - best_other >= eta - 1e-6, || format!("draw {d}: margin {} < eta {eta}", eps - best_other))?;
        check(v[target] == 0.0, || format!("draw {d}: v(y) = {}", v[target]))?;
        worst_margin = worst_margin.min(eps - best_other - eta);
    }
    let secs = t0.elapsed().as_secs_f64();
    check(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("{draws} draws in {secs:.2}s, smallest margin slack {worst_margin:.2e}"))
}

// ---- 2: closed-form spot checks

fn criterion_2() -> Outcome {
    let tol = 1e-4;
    let mut worst = 0.0f64;
    let mut close = |name: &str, got: f64, want: f64| -> Result<(), String> {
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= tol, || format!("{name}: {got} vs {want}"))
    };
    let f = adaption_factor(&[0.7, 0.1, 0.1, 0.1], 0, &[0.0, 0.5, 0.25, 0.25], 0.2);
    close("ex1 p_max", f.p_max, 0.7)?;
    close("ex1 alpha", f.alpha, 1.0)?;
    close("ex1 lambda", f.lambda, 0.5 / 1.5 + 0.2)?;
    close("ex1 eps", f.epsilon, 0.7)?;
    // only max(v) enters the factors
    let f = adaption_factor(&[0.1, 0.6, 0.2, 0.1], 0, &[0.0, 0.25, 0.25, 0.25], 0.2);
    close("ex2 p_max", f.p_max, 0.6)?;
    close("ex2 alpha", f.alpha, 0.02778)?;
    close("ex2 lambda", f.lambda, 0.4)?;
    close("ex2 eps", f.epsilon, 0.98889)?;
    let f = adaption_factor(&[1.0, 0.0, 0.0, 0.0], 0, &[0.0, 0.5, 0.5, 0.0], 0.2);
    close("ex3 p_max", f.p_max, 1.0)?;
    close("ex3 alpha", f.alpha, 1.0)?;
    close("ex3 eps", f.epsilon, 1.0)?;
    let cfg = AdaLabelConfig {
        trunc_low: 2,
        trunc_high: 3,
        ..Default::default()
    };
    let v = build_auxiliary_distribution(&[2.0, 1.0, 0.5, -1.0, -3.0], 1, &cfg).map_err(|e| e.to_string())?;
    for (k, want) in [0.0, 0.0, 0.8176, 0.1824, 0.0].iter().enumerate() {
        close(&format!("v[{k}]"), v[k], *want)?;
    }
    let q = mix_targets(0, &[0.0, 0.5, 0.5], 0.6).map_err(|e| e.to_string())?;
    for (k, want) in [0.6, 0.2, 0.2].iter().enumerate() {
        close(&format!("q'[{k}]"), q.dist[k], *want)?;
    }
    let s = adalabel_step(&[0.0f64; 4], &[0.0, 0.0, -1e9, -1e9], 0, &AdaLabelConfig::default())
        .map_err(|e| e.to_string())?;
    close("dialogue loss", s.dialogue_loss, 4f64.ln())?;
    close("aux loss", s.aux_loss, 2f64.ln())?;
    Ok(format!("max abs error {worst:.2e} (tolerance {tol:.0e})"))
}

// ---- 3: no leakage

fn criterion_3() -> Outcome {
    let vocab = 40;
    let model = Seq2Seq::<f32>::new(ModelConfig::desk(vocab), 11).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let word = |rng: &mut ChaCha8Rng| rng.gen_range(NUM_RESERVED..vocab);
    let logits = |src: &[usize], dec: &[usize], aux: bool| -> Vec<f32> {
        let mut g = Graph::new();
        let s = PaddedIds::from_rows(&[src.to_vec()]);
        let d = PaddedIds::from_rows(&[dec.to_vec()]);
        let mem = model.encode(&mut g, &s).unwrap();
        let out = if aux {
            model.auxiliary_forward(&mut g, &d, &mem).unwrap()
        } else {
            model.dialogue_decoder_forward(&mut g, &d, &mem).unwrap()
        };
        g.value(out).data().to_vec()
    };
    let mut aux_sensitive = 0;
    let trials = 100;
    for t in 0..trials {
        let src: Vec<usize> = (0..rng.gen_range(2..9)).map(|_| word(&mut rng)).collect();
        let len = rng.gen_range(3..12);
        let mut dec = vec![BOS];
        dec.extend((1..len).map(|_| word(&mut rng)));
        let i = rng.gen_range(0..len - 1);
        let row = |l: &[f32], r: usize| l[r * vocab..(r + 1) * vocab].to_vec();

        let base_aux = logits(&src, &dec, true);
        let mut hidden = dec.clone();
        while hidden[i + 1] == dec[i + 1] {
            hidden[i + 1] = word(&mut rng);
        }
        let swapped = logits(&src, &hidden, true);
        check(row(&base_aux, i) == row(&swapped, i), || {
            format!("trial {t}: auxiliary row {i} saw the token it predicts")
        })?;

        let base_dec = logits(&src, &dec, false);
        let j = rng.gen_range(i + 1..len);
        let mut future = dec.clone();
        while future[j] == dec[j] {
            future[j] = word(&mut rng);
        }
        let changed = logits(&src, &future, false);
        check(row(&base_dec, i) == row(&changed, i), || {
            format!("trial {t}: dialogue row {i} saw input {j}")
        })?;

        let others: Vec<usize> = (1..len).filter(|&k| k != i + 1).collect();
        if let Some(&k) = others.get(rng.gen_range(0..others.len().max(1))) {
            let mut other = dec.clone();
            while other[k] == dec[k] {
                other[k] = word(&mut rng);
            }
            if row(&logits(&src, &other, true), i) != row(&base_aux, i) {
                aux_sensitive += 1;
            }
        }
    }
    check(aux_sensitive >= 90, || format!("auxiliary rows reacted to other positions in only {aux_sensitive} trials"))?;
    Ok(format!(
        "{trials} trials bitwise invariant; auxiliary rows reacted to other inputs in {aux_sensitive}/{trials}"
    ))
}

// ---- 4: gradient correctness

fn criterion_4() -> Outcome {
    let corpus = load_corpus(repo_root().join("data/toy/train.tsv")).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&corpus.pairs, 1, None).map_err(|e| e.to_string())?;
    let enc = encode_pairs(&corpus.pairs, &vocab);
    let rows: Vec<&EncodedPair> = enc.iter().take(4).collect();
    let batch = collate(&rows);
    let v = vocab.len();
    let mut model = Seq2Seq::<f32>::new(ModelConfig::desk(v), 4).map_err(|e| e.to_string())?.cast::<f64>();
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();

    let mut g = Graph::<f64>::new();
    let out = model.forward(&mut g, &batch.src, &batch.dec_in).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let targets = prepare_targets(
        Objective::Adalabel,
        g.value(out.dialogue).data(),
        g.value(out.auxiliary).data(),
        v,
        &batch,
        batch.target_tokens(),
        &AdaLabelConfig::default(),
        &BaselineConfig::default(),
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    check(matches!(targets.dialogue, DialogueTarget::Dense(_)), || "adaptive target not dense".into())?;
    let nodes = loss_from_targets(&mut g, &out, &targets, 1.0).map_err(|e| e.to_string())?;
    let grads = g.backward(nodes.total).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = (0..names.len())
        .flat_map(|i| match grads.param(i) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; model.params().get(i).len()],
        })
        .collect();

    let dialogue_only = g.backward(nodes.dialogue).map_err(|e| e.to_string())?;
    let mut aux_params = 0;
    for (i, n) in names.iter().enumerate() {
        if n.starts_with("aux.") {
            aux_params += 1;
            let zero = dialogue_only.param(i).map_or(true, |gr| gr.iter().all(|&x| x == 0.0));
            check(zero, || format!("dialogue loss reaches `{n}`"))?;
        }
    }

    let theta = model.params().flatten();
    let loss_at = |model: &mut Seq2Seq<f64>, point: &[f64]| -> f64 {
        model.params_mut().assign_flat(point);
        let mut g = Graph::<f64>::new();
        let out = model.forward(&mut g, &batch.src, &batch.dec_in).unwrap();
        let nodes = loss_from_targets(&mut g, &out, &targets, 1.0).unwrap();
        g.value(nodes.total).data()[0]
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let directions = 24;
    for d in 0..directions {
        let mut dir: Vec<f64> = (0..theta.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);
        let plus: Vec<f64> = theta.iter().zip(&dir).map(|(t, e)| t + h * e).collect();
        let minus: Vec<f64> = theta.iter().zip(&dir).map(|(t, e)| t - h * e).collect();
        let fd = (loss_at(&mut model, &plus) - loss_at(&mut model, &minus)) / (2.0 * h);
        let ad: f64 = analytic.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-12);
        worst = worst.max(rel);
        check(rel < 1e-4, || format!("direction {d}: fd {fd:.9e} vs tape {ad:.9e}"))?;
    }
    Ok(format!(
        "{directions} directions over {} parameters, worst relative error {worst:.2e}; dialogue-loss gradient is 0 on all {aux_params} auxiliary tensors",
        theta.len()
    ))
}

// ---- 5: degeneracies

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        hidden: 16,
        ffn_dim: 32,
        max_len: 32,
        ..ModelConfig::desk(vocab)
    }
}

fn stub(id: u64, vocab: usize) -> FnStepModel<impl Fn(&[usize], &[usize]) -> Vec<f32>> {
    FnStepModel {
        vocab,
        f: move |ctx: &[usize], prefix: &[usize]| {
            let mut seed = id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            for &t in ctx.iter().chain(prefix) {
                seed = seed.rotate_left(7) ^ (t as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            }
            seed ^= prefix.len() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect()
        },
    }
}

fn criterion_5() -> Outcome {
    let corpus = load_corpus(repo_root().join("data/toy/train.tsv")).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&corpus.pairs, 1, None).map_err(|e| e.to_string())?;
    let enc = encode_pairs(&corpus.pairs, &vocab);
    let run = |objective: Objective| {
        let cfg = TrainConfig {
            objective,
            lr: 1e-3,
            batch_size: 16,
            max_steps: 30,
            eval_every: 10,
            seed: 5,
            ..Default::default()
        };
        let model = Seq2Seq::new(tiny(vocab.len()), 5).unwrap();
        let mut t = Trainer::new(model, cfg, AdaLabelConfig::default(), enc.clone()).unwrap();
        let out = train(&mut t, &enc[..64], &vocab, |_| {}).unwrap();
        let log: Vec<String> = out.log.iter().map(|r| r.tsv_row()).collect();
        (log, out.last.params.flatten())
    };
    let forced = Objective::Ablation(TargetRecipe {
        epsilon: EpsilonRule::Fixed(1.0),
        v: AuxSource::Truncated,
    });
    let (ce_log, ce_params) = run(Objective::Ce);
    let (one_log, one_params) = run(forced);
    check(ce_log == one_log, || format!("step logs differ:\n{ce_log:?}\n{one_log:?}"))?;
    check(ce_params == one_params, || "final parameters differ".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let v = rng.gen_range(2..300);
        let t = rng.gen_range(0..v);
        let s: f64 = rng.gen_range(0.0..0.6);
        let eps = 1.0 - s + s / v as f64;
        let p = random_simplex(&mut rng, v);
        let recipe = TargetRecipe {
            epsilon: EpsilonRule::Fixed(eps),
            v: AuxSource::Uniform,
        };
        let (q, _) = position_target(&p, &vec![0.0; v], t, recipe, &AdaLabelConfig::default(), &mut rng)
            .map_err(|e| e.to_string())?;
        let ls = ls_target(t, v, s);
        for (a, b) in q.dist.iter().zip(&ls) {
            worst = worst.max((a - b).abs());
        }
    }
    // the same through the batch target path used in training
    let v = vocab.len();
    let rows: Vec<&EncodedPair> = enc.iter().take(8).collect();
    let batch = collate(&rows);
    let s = BaselineConfig::default().ls_smoothing;
    let logits = vec![0.0f64; batch.dec_out.ids.len() * v];
    let dense = |o: Objective| match prepare_targets(
        o,
        &logits,
        &logits,
        v,
        &batch,
        batch.target_tokens(),
        &AdaLabelConfig::default(),
        &BaselineConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap()
    .dialogue
    {
        DialogueTarget::Dense(q) => q.to_vec(),
        _ => unreachable!(),
    };
    let ls = dense(Objective::Ls);
    let ab = dense(Objective::Ablation(TargetRecipe {
        epsilon: EpsilonRule::Fixed(1.0 - s + s / v as f64),
        v: AuxSource::Uniform,
    }));
    for (a, b) in ls.iter().zip(&ab) {
        worst = worst.max((a - b).abs());
    }
    check(worst <= 1e-7, || format!("uniform ablation vs label smoothing: {worst:.2e}"))?;

    for id in 0..100 {
        let m = stub(id, 14);
        let ctx = [NUM_RESERVED + id as usize % 9];
        let g = greedy(&m, &ctx, 15).map_err(|e| e.to_string())?;
        for norm in [false, true] {
            let b = beam_search(&m, &ctx, 1, norm, 15).map_err(|e| e.to_string())?;
            check(b == g, || format!("stub {id}: beam-1 {b:?} vs greedy {g:?}"))?;
        }
        let k = top_k_sample(&m, &ctx, 1, 15, id).map_err(|e| e.to_string())?;
        check(k == g, || format!("stub {id}: top-1 {k:?} vs greedy {g:?}"))?;
    }
    Ok(format!(
        "CE and eps=1 logs identical over {} evals; uniform-v vs LS max diff {worst:.1e}; beam-1 = top-1 = greedy on 100 stubs",
        ce_log.len()
    ))
}

// ---- 6: metric oracles

mod oracle {
    use std::collections::BTreeMap;

    pub fn grams(r: &[String], n: usize) -> Vec<String> {
        if r.len() < n {
            return Vec::new();
        }
        (0..=r.len() - n).map(|i| r[i..i + n].join("\u{1}")).collect()
    }

    fn pooled(rs: &[Vec<String>], n: usize) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for r in rs {
            for g in grams(r, n) {
                *m.entry(g).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn distinct(rs: &[Vec<String>], n: usize) -> f64 {
        let m = pooled(rs, n);
        m.len() as f64 / m.values().sum::<usize>() as f64
    }

    pub fn entropy(rs: &[Vec<String>], n: usize) -> f64 {
        let m = pooled(rs, n);
        let total = m.values().sum::<usize>() as f64;
        -m.values().map(|&c| (c as f64 / total) * (c as f64 / total).ln()).sum::<f64>()
    }

    pub fn lf(rs: &[Vec<String>], freq: &dyn Fn(&str) -> u64) -> f64 {
        let all: Vec<&String> = rs.iter().flatten().collect();
        all.iter().filter(|t| freq(t) < 100).count() as f64 / all.len() as f64
    }

    pub fn bleu(h: &[Vec<String>], r: &[Vec<String>], n: usize) -> f64 {
        let mut logp = 0.0;
        for k in 1..=n {
            let (mut hit, mut tot) = (0usize, 0usize);
            for (hh, rr) in h.iter().zip(r) {
                let hg = grams(hh, k);
                let mut rg = grams(rr, k);
                tot += hg.len();
                for g in hg {
                    if let Some(pos) = rg.iter().position(|x| *x == g) {
                        rg.remove(pos);
                        hit += 1;
                    }
                }
            }
            if hit == 0 {
                return 0.0;
            }
            logp += (hit as f64 / tot as f64).ln() / n as f64;
        }
        let hl: usize = h.iter().map(Vec::len).sum();
        let rl: usize = r.iter().map(Vec::len).sum();
        let bp = if hl >= rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
        bp * logp.exp()
    }

    pub fn bins(rs: &[Vec<String>], freq: &dyn Fn(&str) -> u64, edges: &[u64]) -> Vec<f64> {
        let all: Vec<&String> = rs.iter().flatten().collect();
        let mut out = Vec::new();
        for w in edges.windows(2) {
            let c = all.iter().filter(|t| (w[0]..w[1]).contains(&freq(t))).count();
            out.push(c as f64 / all.len() as f64);
        }
        out
    }
}

fn words(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn criterion_6() -> Outcome {
    let tol = 1e-9;
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lexicon: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let edges = [0u64, 3, 50, 100, 1000];
    for c in 0..100 {
        let sample = |rng: &mut ChaCha8Rng| -> Vec<String> {
            (0..rng.gen_range(1..9)).map(|_| lexicon[rng.gen_range(0..lexicon.len())].clone()).collect()
        };
        let n_resp = rng.gen_range(1..8);
        let hyps: Vec<Vec<String>> = (0..n_resp).map(|_| sample(&mut rng)).collect();
        let refs: Vec<Vec<String>> = (0..n_resp).map(|_| sample(&mut rng)).collect();
        let counts: HashMap<String, u64> = lexicon.iter().map(|w| (w.clone(), rng.gen_range(0..400))).collect();
        let freq = |t: &str| counts.get(t).copied().unwrap_or(0);
        let mut cmp = |name: String, got: f64, want: f64| -> Result<(), String> {
            worst = worst.max((got - want).abs());
            check((got - want).abs() <= tol, || format!("corpus {c} {name}: {got} vs oracle {want}"))
        };
        for n in 1..=2 {
            if oracle::grams(&hyps.concat(), 1).len() >= n && hyps.iter().any(|h| h.len() >= n) {
                cmp(format!("dist-{n}"), distinct_n(&hyps, n).unwrap(), oracle::distinct(&hyps, n))?;
                cmp(format!("ent-{n}"), entropy_n(&hyps, n).unwrap(), oracle::entropy(&hyps, n))?;
            }
        }
        cmp("lf".into(), low_frequency_ratio(&hyps, &counts, 100).unwrap(), oracle::lf(&hyps, &freq))?;
        for n in 1..=4 {
            cmp(format!("bleu-{n}"), bleu_n(&hyps, &refs, n).unwrap(), oracle::bleu(&hyps, &refs, n))?;
        }
        let bins = rare_word_bins(&hyps, &counts, &edges).unwrap();
        for (k, (a, b)) in bins.fractions.iter().zip(oracle::bins(&hyps, &freq, &edges)).enumerate() {
            cmp(format!("bin {k}"), *a, b)?;
        }
        let probs: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let mut hist = ConfidenceHistogram::new(0.05).unwrap();
        probs.iter().for_each(|&p| hist.add(p));
        for (k, &count) in hist.counts.iter().enumerate() {
            let lo = k as f64 * 0.05;
            let want = probs
                .iter()
                .filter(|&&p| if k + 1 == hist.counts.len() { p >= lo - 1e-12 } else { p >= lo - 1e-12 && p < lo + 0.05 - 1e-12 })
                .count() as u64;
            check(count == want, || format!("corpus {c} histogram bin {k}: {count} vs {want}"))?;
        }
    }

    let hand = vec![words(&["i", "am", "sure"]), words(&["i", "am", "not"])];
    let d1 = distinct_n(&hand, 1).unwrap();
    check(d1 == 4.0 / 6.0, || format!("Dist-1 {d1}"))?;
    let d2 = distinct_n(&hand, 2).unwrap();
    check(d2 == 0.75, || format!("Dist-2 {d2}"))?;
    let ent = entropy_n(&[words(&["a", "a", "b"])], 1).unwrap();
    let ent_want = -(2.0 / 3.0 * (2.0f64 / 3.0).ln() + 1.0 / 3.0 * (1.0f64 / 3.0).ln());
    check(ent == ent_want && (ent - 0.6365).abs() < 5e-5, || format!("Ent {ent}"))?;
    let b2 = bleu_n(&[words(&["a", "b", "c"])], &[words(&["a", "b", "d"])], 2).unwrap();
    check(b2 == (2.0f64 / 3.0 * 0.5).sqrt() && (b2 - 0.5774).abs() < 5e-5, || format!("BLEU-2 {b2}"))?;
    Ok(format!(
        "100 random corpora agree with brute force (max diff {worst:.1e}); Dist-1 {d1:.4}, Dist-2 {d2}, Ent {ent:.4}, BLEU-2 {b2:.4}"
    ))
}

// ---- 7 and 8: desk-scale comparison

struct RunStats {
    secs: f64,
    confidence: f64,
    dist1: f64,
    dist2: f64,
    accuracy: f64,
    aux_accuracy: f64,
}

const DESK_STEPS: u64 = 800;
const DESK_LR: f64 = 1e-3;

fn desk_run(objective: Objective, seed: u64) -> Result<RunStats, String> {
    let root = repo_root().join("data/synth");
    let train_pairs = load_corpus(root.join("train.tsv")).map_err(|e| e.to_string())?.pairs;
    let valid_pairs = load_corpus(root.join("valid.tsv")).map_err(|e| e.to_string())?.pairs;
    let vocab = build_vocab(&train_pairs, 1, None).map_err(|e| e.to_string())?;
    let train_enc = encode_pairs(&train_pairs, &vocab);
    let valid_enc = encode_pairs(&valid_pairs, &vocab);
    let t0 = Instant::now();
    let cfg = TrainConfig {
        objective,
        lr: DESK_LR,
        max_steps: DESK_STEPS,
        eval_every: DESK_STEPS,
        seed,
        ..Default::default()
    };
    let model = Seq2Seq::new(ModelConfig::desk(vocab.len()), seed).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, cfg, AdaLabelConfig::default(), train_enc).map_err(|e| e.to_string())?;
    let out = train(&mut trainer, &valid_enc, &vocab, |_| {}).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let model = out.best.model().map_err(|e| e.to_string())?;
    let scores = evaluate_held_out(&model, &valid_enc, 64).map_err(|e| e.to_string())?;
    let hist = confidence_histogram(&model, &valid_enc, &vocab, 0.05, 64).map_err(|e| e.to_string())?;
    let contexts: Vec<Vec<usize>> = valid_pairs.iter().map(|p| vocab.encode(&p.context)).collect();
    let hyps = decode_all(
        &model,
        &contexts,
        &DecodeConfig {
            max_len: 20,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let texts: Vec<Vec<String>> = hyps.iter().map(|h| vocab.decode(&h.tokens)).collect();
    Ok(RunStats {
        secs,
        confidence: hist.mean(),
        dist1: distinct_n(&texts, 1).unwrap_or(0.0),
        dist2: distinct_n(&texts, 2).unwrap_or(0.0),
        accuracy: scores.token_accuracy,
        aux_accuracy: scores.aux_accuracy,
    })
}

fn desk_runs() -> Result<Vec<(RunStats, RunStats)>, String> {
    (0..3u64)
        .map(|seed| Ok((desk_run(Objective::Ce, seed)?, desk_run(Objective::Adalabel, seed)?)))
        .collect()
}

fn criterion_7(runs: &[(RunStats, RunStats)]) -> Outcome {
    let mut lines = Vec::new();
    let mut diverse = 0;
    for (seed, (ce, ada)) in runs.iter().enumerate() {
        check(ce.secs <= 600.0 && ada.secs <= 600.0, || format!("seed {seed} exceeded 10 minutes"))?;
        check(ada.confidence < ce.confidence, || {
            format!("seed {seed}: confidence {:.4} (AdaLabel) vs {:.4} (CE)", ada.confidence, ce.confidence)
        })?;
        if ada.dist1 > ce.dist1 && ada.dist2 > ce.dist2 {
            diverse += 1;
        }
        lines.push(format!(
            "seed {seed}: conf {:.3}/{:.3} d1 {:.4}/{:.4} d2 {:.4}/{:.4} ({:.0}s/{:.0}s)",
            ce.confidence, ada.confidence, ce.dist1, ada.dist1, ce.dist2, ada.dist2, ce.secs, ada.secs
        ));
    }
    check(diverse >= 2, || format!("diversity higher in {diverse}/3 seeds; {}", lines.join("; ")))?;
    Ok(format!("CE/AdaLabel {}; diversity higher in {diverse}/3", lines.join("; ")))
}

fn criterion_8(runs: &[(RunStats, RunStats)]) -> Outcome {
    let wins = runs.iter().filter(|(_, a)| a.aux_accuracy > a.accuracy).count();
    let detail: Vec<String> = runs
        .iter()
        .enumerate()
        .map(|(s, (_, a))| format!("seed {s}: aux {:.4} vs dialogue {:.4}", a.aux_accuracy, a.accuracy))
        .collect();
    check(wins >= 2, || format!("{wins}/3; {}", detail.join("; ")))?;
    Ok(format!("{wins}/3 seeds; {}", detail.join("; ")))
}

// ---- 9: reproducibility

fn adalab(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_adalab"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "adalab {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    let run = root.join("run");
    let cfg_path = root.join("config.json");
    std::fs::write(
        &cfg_path,
        r#"{
  "data": { "train": "data/train.tsv", "valid": "data/valid.tsv" },
  "model": { "enc_layers": 1, "dec_layers": 1, "heads": 2, "hidden": 16, "ffn_dim": 32, "max_len": 32 },
  "train": { "objective": "adalabel", "lr": 1e-3, "batch_size": 16, "grad_accum": 2, "max_steps": 30, "eval_every": 10 },
  "output_dir": "run",
  "seed": 3
}"#,
    )
    .map_err(|e| e.to_string())?;
    let ck = s(&run.join("checkpoint.bin"));
    let valid = s(&data.join("valid.tsv"));
    let train_tsv = s(&data.join("train.tsv"));
    let gens: Vec<(String, Vec<String>)> = [
        ("greedy", vec![]),
        ("beam", vec!["--width", "3"]),
        ("topk", vec!["--k", "5", "--seed", "7"]),
    ]
    .iter()
    .map(|(name, extra)| {
        let mut a = vec![
            "generate".to_string(),
            "--checkpoint".into(),
            ck.clone(),
            "--corpus".into(),
            valid.clone(),
            "--output".into(),
            s(&root.join(format!("gen/{name}.tsv"))),
            "--scheme".into(),
            name.to_string(),
            "--max-len".into(),
            "15".into(),
        ];
        a.extend(extra.iter().map(|x| x.to_string()));
        (name.to_string(), a)
    })
    .collect();
    let commands: Vec<(String, Vec<String>, PathBuf)> = {
        let mut c = vec![(
            "synth".to_string(),
            vec!["synth", "--output-dir", &s(&data), "--items", "20", "--seed", "2"]
                .into_iter()
                .map(String::from)
                .collect(),
            data.clone(),
        )];
        c.push((
            "train".into(),
            vec!["train".into(), "--config".into(), s(&cfg_path)],
            run.clone(),
        ));
        for (name, a) in &gens {
            c.push((format!("generate {name}"), a.clone(), root.join("gen")));
        }
        c.push((
            "evaluate".into(),
            vec![
                "evaluate", "--generations", &s(&root.join("gen/greedy.tsv")), "--train-corpus", &train_tsv,
                "--against", &ck, "--output-dir", &s(&root.join("eval")),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            root.join("eval"),
        ));
        c.push((
            "analyze".into(),
            vec!["analyze", "--checkpoint", &ck, "--corpus", &valid, "--output-dir", &s(&root.join("an")), "--max-len", "15"]
                .into_iter()
                .map(String::from)
                .collect(),
            root.join("an"),
        ));
        c
    };
    let mut files = 0;
    for (name, args, dir) in &commands {
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let out1 = adalab(&argv)?;
        let first = snapshot(dir);
        let out2 = adalab(&argv)?;
        let second = snapshot(dir);
        check(out1 == out2, || format!("{name}: stdout differs"))?;
        check(!first.is_empty() && first == second, || format!("{name}: output files differ on rerun"))?;
        files += first.len();
    }

    // save -> load -> evaluate
    let loaded = Checkpoint::load(&ck).map_err(|e| e.to_string())?;
    let pairs = load_corpus(&valid).map_err(|e| e.to_string())?.pairs;
    let enc = encode_pairs(&pairs, &loaded.vocab);
    let m1 = loaded.model().map_err(|e| e.to_string())?;
    let s1 = evaluate_held_out(&m1, &enc, 64).map_err(|e| e.to_string())?;
    let again = root.join("again.bin");
    loaded.save(&again).map_err(|e| e.to_string())?;
    check(std::fs::read(&again).unwrap() == std::fs::read(&ck).unwrap(), || "re-saved checkpoint differs".into())?;
    let s2 = evaluate_held_out(&Checkpoint::load(&again).unwrap().model().unwrap(), &enc, 64).map_err(|e| e.to_string())?;
    check(s1 == s2, || format!("{s1:?} vs {s2:?}"))?;
    let best = loaded.best.ok_or("checkpoint has no best scores")?;
    check(best.perplexity == s1.perplexity && best.accuracy == s1.token_accuracy, || {
        format!("recorded {best:?} vs reloaded {s1:?}")
    })?;

    check(!tokenize(&std::fs::read_to_string(root.join("gen/greedy.tsv")).unwrap()).is_empty(), || {
        "empty generations".into()
    })?;
    Ok(format!(
        "{} commands rerun byte-identically ({files} files); reloaded checkpoint reproduces ppl {:.4} exactly",
        commands.len(),
        s1.perplexity
    ))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ADALAB_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let guard = |f: &dyn Fn() -> Outcome| -> Outcome {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        })
    };
    let names = [
        "target invariants",
        "closed-form values",
        "no leakage",
        "gradient correctness",
        "degenerate equivalences",
        "metric oracles",
        "lower confidence, higher diversity",
        "auxiliary decoder more accurate",
        "reproducibility",
    ];
    let singles: [(usize, &dyn Fn() -> Outcome); 6] = [
        (1, &criterion_1),
        (2, &criterion_2),
        (3, &criterion_3),
        (4, &criterion_4),
        (5, &criterion_5),
        (6, &criterion_6),
    ];
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    for (n, f) in singles {
        if wanted(n) {
            results.push((n, guard(f)));
        }
    }
    if wanted(7) || wanted(8) {
        let runs = catch_unwind(desk_runs).unwrap_or_else(|_| Err("desk runs panicked".into()));
        let (c7, c8) = match &runs {
            Ok(r) => (criterion_7(r), criterion_8(r)),
            Err(e) => (Err(e.clone()), Err(e.clone())),
        };
        if wanted(7) {
            results.push((7, c7));
        }
        if wanted(8) {
            results.push((8, c8));
        }
    }
    if wanted(9) {
        results.push((9, guard(&criterion_9)));
    }
    let mut failed = 0;
    for (n, r) in &results {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => {
                failed += 1;
                ("FAIL", d.as_str())
            }
        };
        println!("criterion {n} [{tag}] {}: {detail}", names[n - 1]);
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
