use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use polylm::corpus::{
    apply_lemma_splits, build_vocabulary, read_corpus, read_tagged_corpus, read_vocab_file, synthesize_pseudowords,
    topic_corpus, topic_pseudoword_specs, write_corpus, write_vocab_file, SenseInventory, TopicCorpusConfig,
    VocabConfig, Vocabulary,
};
use polylm::metrics::{evaluate, read_labeling, TaskStyle};
use polylm::model::PolyLm;
use polylm::numerics::OpKind;
use polylm::senses::{
    label_instances, read_wsi_dataset, sense_usage_stats, write_dead_senses, Protocol, SenseError, SenseTable,
    WsiInstance, DEAD_SHARE, DEFAULT_P_THRESH,
};
use polylm::training::{latest_checkpoint, Checkpoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::Invalid;

/// Opens an input file; a missing file is a usage error.
pub fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Invalid(format!("{}: no such file", path.display())).into())
        }
        Err(e) => Err(e).with_context(|| format!("opening {}", path.display())),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

pub fn read_docs(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    Ok(read_corpus(open(path)?).with_context(|| format!("reading {}", path.display()))?)
}

pub fn read_vocab(path: &Path) -> anyhow::Result<(Vocabulary, SenseInventory)> {
    Ok(read_vocab_file(open(path)?).with_context(|| format!("reading {}", path.display()))?)
}

/// Loads a checkpoint file, or the latest checkpoint of a training directory.
fn load_model(path: &Path) -> anyhow::Result<PolyLm> {
    let file = if path.is_dir() {
        latest_checkpoint(path)?.ok_or_else(|| Invalid(format!("no checkpoint in {}", path.display())))?
    } else if path.exists() {
        path.to_path_buf()
    } else {
        return Err(Invalid(format!("{}: no such file", path.display())).into());
    };
    let ckpt = Checkpoint::load(&file).with_context(|| format!("loading {}", file.display()))?;
    log::info!("loaded {} (step {})", file.display(), ckpt.step);
    Ok(ckpt.model)
}

const VOCAB_KEYS: &[&str] = &["min_count", "multi_sense_min_count", "senses_per_word", "focus"];

pub fn build_vocab(corpus: &Path, out: &Path, config: Option<&Path>, overrides: &[String]) -> anyhow::Result<()> {
    let cfg = RunConfig::load(VOCAB_KEYS, config, overrides)?;
    let d = VocabConfig::default();
    let focus: String = cfg.get("focus", String::new())?;
    let vc = VocabConfig {
        min_count: cfg.get("min_count", d.min_count)?,
        multi_sense_min_count: cfg.get("multi_sense_min_count", d.multi_sense_min_count)?,
        senses_per_word: cfg.get("senses_per_word", d.senses_per_word)?,
        focus: focus.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect(),
    };
    for line in cfg.resolved().lines() {
        log::info!("config: {line}");
    }
    let lines: Vec<String> = open(corpus)?.lines().collect::<Result<_, _>>()?;
    let (vocab, inv) = build_vocabulary(&lines, &vc)?;
    let mut w = create(out)?;
    write_vocab_file(&mut w, &vocab, &inv)?;
    w.flush()?;
    log::info!("{} tokens, {} senses written to {}", vocab.len(), inv.total(), out.display());
    Ok(())
}

pub fn lemmatize(tagged: &Path, out: &Path) -> anyhow::Result<()> {
    let docs = read_tagged_corpus(open(tagged)?)?;
    let split: Vec<Vec<String>> = docs.iter().map(|d| apply_lemma_splits(d).tokens).collect();
    let mut w = create(out)?;
    write_corpus(&mut w, &split)?;
    w.flush()?;
    Ok(())
}

/// Writes `train.txt`, `eval.tsv` (WSI dataset), `gold.tsv` and a
/// `vocab.conf` that makes every pseudoword multi-sense.
pub fn synth(out: &Path, sentences: usize, seed: u64, holdout: f64, senses: u32) -> anyhow::Result<()> {
    if sentences == 0 {
        return Err(Invalid("--sentences must be positive".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = topic_corpus(&TopicCorpusConfig { sentences, ..Default::default() }, &mut rng);
    let specs = topic_pseudoword_specs();
    let split = synthesize_pseudowords(&corpus.docs, &specs, holdout, &mut rng)?;
    fs::create_dir_all(out)?;

    let mut w = create(&out.join("train.txt"))?;
    write_corpus(&mut w, &split.train)?;
    w.flush()?;
    let mut ds = create(&out.join("eval.tsv"))?;
    let mut gold = create(&out.join("gold.tsv"))?;
    for e in &split.eval {
        writeln!(ds, "{}\t{}\t{}\t{}", e.id, e.merged, e.focus, e.tokens.join(" "))?;
        writeln!(gold, "{}\t{}\t{}", e.id, e.merged, e.gold)?;
    }
    ds.flush()?;
    gold.flush()?;
    let focus: Vec<&str> = specs.iter().map(|s| s.merged.as_str()).collect();
    fs::write(
        out.join("vocab.conf"),
        format!(
            "min_count = 0\nmulti_sense_min_count = 1000000000\nsenses_per_word = {senses}\nfocus = {}\n",
            focus.join(",")
        ),
    )?;
    log::info!(
        "{} training documents, {} evaluation instances in {}",
        split.train.len(),
        split.eval.len(),
        out.display()
    );
    Ok(())
}

pub fn wsi(checkpoint: &Path, dataset: &Path, out: &Path, protocol: &str, p_thresh: Option<f64>) -> anyhow::Result<()> {
    let protocol: Protocol = protocol.parse().map_err(|e: SenseError| Invalid(e.to_string()))?;
    if protocol == Protocol::Single && p_thresh.is_some() {
        log::warn!("--p-thresh only applies to the multi protocol; ignored");
    }
    let p = p_thresh.unwrap_or(DEFAULT_P_THRESH);
    let instances: Vec<WsiInstance> = read_wsi_dataset(open(dataset)?)?;
    let model = load_model(checkpoint)?;
    let labels = label_instances(&model, &instances, protocol, p)?;
    let mut w = create(out)?;
    let skipped_path = sidecar(out, ".skipped");
    let mut skipped = create(&skipped_path)?;
    let mut n_skipped = 0;
    for l in labels {
        match l {
            Ok(l) => writeln!(w, "{}", l.to_line())?,
            Err(SenseError::Unresolvable { id, reason }) => {
                writeln!(skipped, "{id}\t{reason}")?;
                n_skipped += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    w.flush()?;
    skipped.flush()?;
    if n_skipped > 0 {
        log::warn!("{n_skipped} instances skipped; reasons in {}", skipped_path.display());
    }
    log::info!("labeled {} instances ({protocol})", instances.len() - n_skipped);
    Ok(())
}

pub fn eval(labeling: &Path, gold: &Path, task_style: &str, tsv: bool) -> anyhow::Result<()> {
    let style: TaskStyle = task_style.parse()?;
    let l = read_labeling(open(labeling)?).with_context(|| format!("reading {}", labeling.display()))?;
    let g = read_labeling(open(gold)?).with_context(|| format!("reading {}", gold.display()))?;
    let report = evaluate(&l, &g, style)?;
    print!("{}", if tsv { report.tsv() } else { report.table() });
    Ok(())
}

pub fn neighbors(checkpoint: &Path, word: &str, sense: Option<usize>, top: usize) -> anyhow::Result<()> {
    let model = load_model(checkpoint)?;
    let table = SenseTable::from_model(&model);
    let word = polylm::corpus::normalize_token(word);
    let id = model.vocab.id(&word).ok_or_else(|| Invalid(format!("{word:?} is not in the vocabulary")))?;
    let count = model.inventory.sense_count(id);
    let senses: Vec<usize> = match sense {
        Some(s) if s >= count => return Err(Invalid(format!("{word} has {count} senses; no sense {s}")).into()),
        Some(s) => vec![s],
        None => (0..count).collect(),
    };
    let mut out = std::io::stdout().lock();
    for s in senses {
        let row = table.find(&word, s).expect("sense present in table");
        for (i, sim) in table.neighbors(row, top)? {
            writeln!(out, "{word}.{s}\t{}.{}\t{sim:.6}", table.words[i], table.sense_idx[i])?;
        }
    }
    Ok(())
}

pub fn export(
    checkpoint: &Path,
    out: &Path,
    words: Option<&Path>,
    usage_corpus: Option<&Path>,
    max_per_word: usize,
) -> anyhow::Result<()> {
    let model = load_model(checkpoint)?;
    let scope: Option<Vec<String>> = match words {
        Some(p) => Some(
            open(p)?
                .lines()
                .map(|l| l.map(|l| polylm::corpus::normalize_token(l.trim())))
                .filter(|l| l.as_ref().map_or(true, |l| !l.is_empty()))
                .collect::<Result<_, _>>()?,
        ),
        None => None,
    };
    let table = SenseTable::from_model(&model);
    let mut w = create(out)?;
    let n = table.export(&mut w, scope.as_deref())?;
    w.flush()?;
    log::info!("exported {n} sense vectors to {}", out.display());
    if let Some(c) = usage_corpus {
        let docs = read_docs(c)?;
        let usage = sense_usage_stats(&model, &docs, max_per_word)?;
        let path = sidecar(out, ".dead");
        let mut d = create(&path)?;
        let dead = write_dead_senses(&mut d, &model, &usage, DEAD_SHARE)?;
        d.flush()?;
        log::info!("{dead} dead senses listed in {}", path.display());
    }
    Ok(())
}

pub fn selfcheck(fault: Option<&str>) -> anyhow::Result<()> {
    let fault = fault.map(|f| f.parse::<OpKind>().map_err(Invalid)).transpose()?;
    let report = polylm::selfcheck::run(fault);
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        anyhow::bail!("{failed} of {} checks failed", report.checks.len())
    }
}
