//! Pseudoword construction: two real words merged into one ambiguous token.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use super::vocab::normalize_token;
use super::CorpusError;

/// Minimum training occurrences each source word must keep after holdout.
pub const MIN_TRAIN_OCCURRENCES: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudowordSpec {
    pub first: String,
    pub second: String,
    pub merged: String,
}

impl PseudowordSpec {
    /// Merged form `first_second`.
    pub fn new(first: &str, second: &str) -> Self {
        let (a, b) = (normalize_token(first), normalize_token(second));
        let merged = format!("{a}_{b}");
        PseudowordSpec { first: a, second: b, merged }
    }
}

/// A held-out occurrence with its rewritten document as context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalInstance {
    pub id: String,
    pub merged: String,
    pub tokens: Vec<String>,
    pub focus: usize,
    /// The source word that originally stood at `focus`.
    pub gold: String,
}

#[derive(Clone, Debug, Default)]
pub struct PseudowordSplit {
    pub train: Vec<Vec<String>>,
    pub eval: Vec<EvalInstance>,
    /// Indices of withheld documents in the input corpus, ascending.
    pub held_out: Vec<usize>,
}

/// Rewrites every source occurrence to its merged token and withholds
/// whole documents until roughly `holdout_fraction` of each pair's
/// occurrences are held out.
pub fn synthesize_pseudowords<R: Rng + ?Sized>(
    corpus: &[Vec<String>],
    specs: &[PseudowordSpec],
    holdout_fraction: f64,
    rng: &mut R,
) -> Result<PseudowordSplit, CorpusError> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(CorpusError::Config(format!("holdout fraction must lie in [0, 1), got {holdout_fraction}")));
    }
    // source token -> (spec index, source)
    let mut source: HashMap<&str, usize> = HashMap::new();
    for (i, s) in specs.iter().enumerate() {
        if s.first == s.second {
            return Err(CorpusError::Config(format!("cannot merge {} with itself", s.first)));
        }
        for w in [&s.first, &s.second] {
            if source.insert(w.as_str(), i).is_some() {
                return Err(CorpusError::Config(format!("{w} appears in more than one pseudoword")));
            }
        }
    }
    let merged: HashSet<&str> = specs.iter().map(|s| s.merged.as_str()).collect();
    if let Some(tok) = corpus.iter().flatten().find(|t| merged.contains(t.as_str())) {
        return Err(CorpusError::Config(format!("merged token {tok} already occurs in the corpus")));
    }

    let mut totals = vec![0usize; specs.len()];
    let mut per_doc: Vec<Vec<usize>> = Vec::with_capacity(corpus.len());
    for doc in corpus {
        let mut c = vec![0usize; specs.len()];
        for t in doc {
            if let Some(&i) = source.get(t.as_str()) {
                c[i] += 1;
            }
        }
        for (tot, n) in totals.iter_mut().zip(&c) {
            *tot += n;
        }
        per_doc.push(c);
    }

    let wanted: Vec<usize> = totals.iter().map(|&n| (holdout_fraction * n as f64).round() as usize).collect();
    let mut candidates: Vec<usize> = (0..corpus.len()).filter(|&d| per_doc[d].iter().any(|&n| n > 0)).collect();
    candidates.shuffle(rng);
    let mut held = vec![0usize; specs.len()];
    let mut held_docs = HashSet::new();
    for d in candidates {
        let useful = (0..specs.len()).any(|i| per_doc[d][i] > 0 && held[i] < wanted[i]);
        if !useful {
            continue;
        }
        held_docs.insert(d);
        for i in 0..specs.len() {
            held[i] += per_doc[d][i];
        }
        if held.iter().zip(&wanted).all(|(h, w)| h >= w) {
            break;
        }
    }

    let mut remaining: HashMap<&str, usize> = HashMap::new();
    let mut split = PseudowordSplit::default();
    let mut serial = vec![0usize; specs.len()];
    for (d, doc) in corpus.iter().enumerate() {
        let rewritten: Vec<String> = doc
            .iter()
            .map(|t| match source.get(t.as_str()) {
                Some(&i) => specs[i].merged.clone(),
                None => t.clone(),
            })
            .collect();
        if held_docs.contains(&d) {
            split.held_out.push(d);
            for (pos, t) in doc.iter().enumerate() {
                if let Some(&i) = source.get(t.as_str()) {
                    split.eval.push(EvalInstance {
                        id: format!("{}.{}", specs[i].merged, serial[i]),
                        merged: specs[i].merged.clone(),
                        tokens: rewritten.clone(),
                        focus: pos,
                        gold: t.clone(),
                    });
                    serial[i] += 1;
                }
            }
        } else {
            for t in doc {
                if source.contains_key(t.as_str()) {
                    *remaining.entry(t.as_str()).or_default() += 1;
                }
            }
            split.train.push(rewritten);
        }
    }
    for s in specs {
        for w in [&s.first, &s.second] {
            let n = remaining.get(w.as_str()).copied().unwrap_or(0);
            if n < MIN_TRAIN_OCCURRENCES {
                return Err(CorpusError::InsufficientOccurrences { token: w.clone(), found: n });
            }
        }
    }
    Ok(split)
}
