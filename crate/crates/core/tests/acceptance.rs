//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use polylm::corpus::{
    build_vocabulary, pack_sequences, synthesize_pseudowords, topic_corpus, topic_pseudoword_specs, MaskAction,
    MaskedBatch, Target, TokenId, TopicCorpusConfig, VocabConfig,
};
use polylm::fixtures::{tiny_batch, TINY_CORPUS};
use polylm::metrics::{avg, paired_f_score, pseudoword_accuracy, v_measure};
use polylm::model::{ForwardOptions, LossObjective, ModelConfig, PolyLm};
use polylm::numerics::{check_gradients, GradCheckConfig};
use polylm::selfcheck::appendix_probe;
use polylm::senses::{center_crop, label_instances, usage_from_instances, Protocol, WsiInstance, DEAD_SHARE};
use polylm::training::{match_cosine, Checkpoint, Schedule, StepRecord, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Desk-sized model over the tiny fixture corpus with `k` senses per
/// repeated word.
fn desk_fixture(k: u32) -> PolyLm {
    let cfg = VocabConfig { min_count: 0, multi_sense_min_count: 1, senses_per_word: k, focus: vec![] };
    let (vocab, inv) = build_vocabulary(TINY_CORPUS, &cfg).unwrap();
    PolyLm::new(ModelConfig::desk(), vocab, inv, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let m = desk_fixture(4);
    let b = tiny_batch(&m);
    assert_eq!(b.rows(), 2);
    let e64 = appendix_probe::<f64>(&m, &b, 1.5, None).unwrap();
    let e32 = appendix_probe::<f32>(&m, &b, 1.5, None).unwrap();
    let t = start.elapsed();
    outcome(
        e64.max_abs < 1e-4 && e32.max_rel < 1e-2 && t < Duration::from_secs(10),
        format!(
            "64-bit max abs {:.2e} (< 1e-4), 32-bit max rel {:.2e} (< 1e-2), {:.2?} (< 10 s)",
            e64.max_abs, e32.max_rel, t
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let m = desk_fixture(4);
    let b = tiny_batch(&m);
    let opts = ForwardOptions { r: 1.5, lambda_m: 0.1, train: false, ..ForwardOptions::default() };
    let obj = LossObjective::new(&m, &b, opts).unwrap();
    let cfg = GradCheckConfig { samples: 256, ..GradCheckConfig::default() };
    let r = check_gradients(&obj, &m.params, &cfg).unwrap();
    let t = start.elapsed();
    outcome(
        r.checked >= 200 && r.max_rel_error < 1e-2 && t < Duration::from_secs(120),
        format!("{} parameters, max rel error {:.2e} (< 1e-2), {:.2?} (< 2 min)", r.checked, r.max_rel_error, t),
    )
}

fn criterion_3() -> Outcome {
    let m = desk_fixture(1);
    assert_eq!(m.inventory.total(), m.vocab.len());
    let b = tiny_batch(&m);
    let lambda = 0.1;
    let opts = ForwardOptions { r: 1.5, lambda_m: lambda, ..ForwardOptions::default() };
    let f = m.forward_with(&m.params.cast::<f64>(), &b, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let o = &f.outputs;
    let v = o.total_senses;
    // Standard masked-LM cross-entropy, coded directly from the logits.
    let mut ce = 0.0;
    let mut worst_sum: f64 = 0.0;
    for (i, &w) in o.target_words.iter().enumerate() {
        let row = &o.logits[i * v..(i + 1) * v];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        ce += lse - row[w as usize];
        let total: f64 = row.iter().map(|z| (z - lse).exp()).sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
    }
    ce /= o.target_words.len() as f64;
    let lm_gap = (ce - o.j_lm).abs();
    outcome(
        o.j_d == 0.0 && o.j_m == -lambda && worst_sum <= 1e-5 && lm_gap <= 1e-6,
        format!(
            "J_D = {}, J_M = {} (want {}), max |sum P - 1| = {:.1e}, |J_LM - CE| = {:.1e}",
            o.j_d, o.j_m, -lambda, worst_sum, lm_gap
        ),
    )
}

/// Pseudoword experiment shared by criteria 4 and 5.
struct PseudoRun {
    accuracy: f64,
    per_word: BTreeMap<String, f64>,
    dead: usize,
    cos_start: f64,
    cos_end: f64,
    elapsed: Duration,
}

const PSEUDO_STEPS: u64 = 50_000;
const PSEUDO_LR: f64 = 1e-4;
const PSEUDO_BATCH: usize = 8;

fn pseudoword_run(distinctness: bool) -> PseudoRun {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let corpus = topic_corpus(&TopicCorpusConfig { sentences: 20_000, ..TopicCorpusConfig::default() }, &mut rng);
    let specs = topic_pseudoword_specs();
    assert_eq!(specs.len(), 3);
    let split = synthesize_pseudowords(&corpus.docs, &specs, 0.1, &mut rng).unwrap();
    let lines: Vec<String> = split.train.iter().map(|d| d.join(" ")).collect();
    let focus: Vec<String> = specs.iter().map(|s| s.merged.clone()).collect();
    let vc = VocabConfig { min_count: 0, multi_sense_min_count: u64::MAX, senses_per_word: 8, focus };
    let (vocab, inv) = build_vocabulary(&lines, &vc).unwrap();
    let model = PolyLm::new(ModelConfig::desk(), vocab, inv, &mut rng).unwrap();
    let docs: Vec<Vec<TokenId>> = split.train.iter().map(|d| model.vocab.encode_tokens(d)).collect();
    let data = pack_sequences(&docs, model.config.seq_len, model.vocab.pad());

    let instances: Vec<WsiInstance> = split
        .eval
        .iter()
        .map(|e| WsiInstance { id: e.id.clone(), lemma: e.merged.clone(), position: e.focus, tokens: e.tokens.clone() })
        .collect();
    let probe = probe_batch(&model, &instances[..64.min(instances.len())]);

    let cfg =
        TrainConfig { batch_size: PSEUDO_BATCH, seed: 7, checkpoint_every: 0, distinctness, ..TrainConfig::default() };
    let mut t = Trainer::new(model, data, Schedule::scaled(PSEUDO_STEPS, PSEUDO_LR).unwrap(), cfg).unwrap();
    let cos_start = match_cosine(&t.model, &probe).unwrap().unwrap();
    t.run(PSEUDO_STEPS, None, |_| {}).unwrap();
    let cos_end = match_cosine(&t.model, &probe).unwrap().unwrap();

    let labels = label_instances(&t.model, &instances, Protocol::Single, 0.5).unwrap();
    let mut by_word: BTreeMap<String, (Vec<usize>, Vec<String>)> = BTreeMap::new();
    for (l, e) in labels.into_iter().zip(&split.eval) {
        let l = l.unwrap();
        let entry = by_word.entry(e.merged.clone()).or_default();
        entry.0.push(l.labels[0].0);
        entry.1.push(e.gold.clone());
    }
    let mut per_word = BTreeMap::new();
    let (mut correct, mut total) = (0.0, 0.0);
    for (w, (senses, gold)) in &by_word {
        let (acc, _) = pseudoword_accuracy(senses, gold).unwrap();
        per_word.insert(w.clone(), acc);
        correct += acc * senses.len() as f64;
        total += senses.len() as f64;
    }
    let usage = usage_from_instances(&t.model, &instances).unwrap();
    let dead = usage.values().map(|u| u.dead(DEAD_SHARE).len()).sum();
    PseudoRun { accuracy: correct / total, per_word, dead, cos_start, cos_end, elapsed: start.elapsed() }
}

/// One masked focus occurrence per row.
fn probe_batch(model: &PolyLm, instances: &[WsiInstance]) -> MaskedBatch {
    let pad = model.vocab.pad();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let (toks, focus) = center_crop(&inst.tokens, inst.position, model.config.seq_len);
        rows.push(model.vocab.encode_tokens(toks));
        targets.push(Target { row: i, pos: focus, action: MaskAction::Masked });
    }
    let width = rows.iter().map(Vec::len).max().unwrap();
    rows.iter_mut().for_each(|r| r.resize(width, pad));
    MaskedBatch::with_targets(rows, targets, &model.vocab, &[]).unwrap()
}

fn criteria_4_and_5() -> (Outcome, Outcome) {
    let full = pseudoword_run(true);
    let ablation = pseudoword_run(false);
    let words: Vec<String> = full.per_word.iter().map(|(w, a)| format!("{w} {a:.3}")).collect();
    let c4 = outcome(
        full.accuracy >= 0.80 && ablation.accuracy < full.accuracy && ablation.dead < full.dead,
        format!(
            "accuracy {:.3} (>= 0.80; {}), ablation accuracy {:.3} (< full), dead senses {} vs ablation {} (ablation fewer), {:.0?} + {:.0?}",
            full.accuracy,
            words.join(", "),
            ablation.accuracy,
            full.dead,
            ablation.dead,
            full.elapsed,
            ablation.elapsed
        ),
    );
    let c5 = outcome(
        full.cos_end - full.cos_start >= 0.05,
        format!("match cosine {:.4} -> {:.4} (increase >= 0.05)", full.cos_start, full.cos_end),
    );
    (c4, c5)
}

/// All-pairs paired F-Score.
fn paired_f_oracle(pred: &[usize], gold: &[usize]) -> f64 {
    let (mut both, mut p, mut g) = (0usize, 0usize, 0usize);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let (sp, sg) = (pred[i] == pred[j], gold[i] == gold[j]);
            p += sp as usize;
            g += sg as usize;
            both += (sp && sg) as usize;
        }
    }
    match (p, g) {
        (0, 0) => 1.0,
        _ if both == 0 => 0.0,
        _ => {
            let (pr, rc) = (both as f64 / p as f64, both as f64 / g as f64);
            2.0 * pr * rc / (pr + rc)
        }
    }
}

fn entropy(counts: &BTreeMap<usize, f64>, n: f64) -> f64 {
    counts.values().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).log2()).sum()
}

/// V-Measure from H(C), H(K), H(C|K) and H(K|C).
fn v_measure_oracle(pred: &[usize], gold: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let mut pc: BTreeMap<usize, f64> = BTreeMap::new();
    let mut gc: BTreeMap<usize, f64> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gold) {
        *pc.entry(p).or_default() += 1.0;
        *gc.entry(g).or_default() += 1.0;
        *joint.entry((p, g)).or_default() += 1.0;
    }
    let (h_c, h_k) = (entropy(&gc, n), entropy(&pc, n));
    let h_c_given_k: f64 = joint.iter().map(|(&(p, _), &c)| -(c / n) * (c / pc[&p]).log2()).sum();
    let h_k_given_c: f64 = joint.iter().map(|(&(_, g), &c)| -(c / n) * (c / gc[&g]).log2()).sum();
    let h = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let c = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    if h + c == 0.0 {
        0.0
    } else {
        2.0 * h * c / (h + c)
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut f_exact, mut v_err): (usize, f64) = (0, 0.0);
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let kp = rng.random_range(1..=n);
        let kg = rng.random_range(1..=n);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..kg)).collect();
        if paired_f_score(&pred, &gold).unwrap() == paired_f_oracle(&pred, &gold) {
            f_exact += 1;
        }
        v_err = v_err.max((v_measure(&pred, &gold).unwrap() - v_measure_oracle(&pred, &gold)).abs());
    }
    let a = avg(64.8, 23.0);
    outcome(
        f_exact == 1000 && v_err <= 1e-9 && (a - 38.6).abs() <= 0.05,
        format!("paired F exact on {f_exact}/1000, V-M max error {v_err:.1e} (<= 1e-9), AVG(64.8, 23.0) = {a:.3}"),
    )
}

fn criterion_7() -> Outcome {
    let s = Schedule::paper();
    let got = [s.at(10_000).lr, s.at(1_000_000).lambda_m, s.at(2_000_000).r, s.at(0).r, s.at(s.total_steps()).lr];
    let want = [3e-5, 0.1, 1.5, 1.0, 0.0];
    outcome(got == want, format!("lr(10k), lambda(1M), r(2M), r(0), lr(total) = {got:?}"))
}

fn criterion_8() -> Outcome {
    let setup = || {
        let (m, data) = polylm::fixtures::toy_training_setup(400, 4, 3);
        let cfg = TrainConfig { batch_size: 4, seed: 9, checkpoint_every: 0, ..TrainConfig::default() };
        Trainer::new(m, data, Schedule::scaled(200, 1e-3).unwrap(), cfg).unwrap()
    };
    let record = |t: &mut Trainer, until| {
        let mut out: Vec<StepRecord> = Vec::new();
        t.run(until, None, |r| out.push(*r)).unwrap();
        out
    };
    let (mut a, mut b) = (setup(), setup());
    let (la, lb) = (record(&mut a, 200), record(&mut b, 200));
    let same_params = a.model.params.iter().zip(b.model.params.iter()).all(|(x, y)| x.2.data() == y.2.data());
    let identical = la == lb && same_params;

    let mut c = setup();
    let mut prefix = record(&mut c, 120);
    let mut bytes = Vec::new();
    c.checkpoint().write_to(&mut bytes).unwrap();
    let ckpt = Checkpoint::read_from(bytes.as_slice()).unwrap();
    let data = polylm::fixtures::toy_training_setup(400, 4, 3).1;
    let mut resumed = Trainer::from_checkpoint(ckpt, data).unwrap();
    prefix.extend(record(&mut resumed, 200));
    let resumed_same = prefix == la;
    outcome(
        identical && resumed_same,
        format!("two seeded 200-step runs bit-identical: {identical}; resume at 120 reproduces steps 120..200: {resumed_same}"),
    )
}

fn main() {
    let mut results: Vec<(u32, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (6, criterion_6()),
        (7, criterion_7()),
        (8, criterion_8()),
    ];
    let (c4, c5) = criteria_4_and_5();
    results.push((4, c4));
    results.push((5, c5));
    results.sort_by_key(|r| r.0);
    for (n, o) in &results {
        println!("{} criterion {n}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|r| !r.1.passed).count();
    if failed > 0 {
        println!("{failed} of {} acceptance criteria failed", results.len());
        std::process::exit(1);
    }
}
