use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Range;

use super::CorpusError;

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const COMP: &str = "[COMP]";
pub const SUP: &str = "[SUP]";

/// Inflection markers emitted by lemma splitting, one per split tag except
/// that comparatives and superlatives share [`COMP`] and [`SUP`].
pub const TAG_MARKERS: [&str; 6] = ["[NNS]", "[VBD]", "[VBG]", "[VBN]", "[VBP]", "[VBZ]"];

/// Special tokens in id order. `[PAD]` is always id 0.
pub fn special_tokens() -> Vec<&'static str> {
    let mut v = vec![PAD, UNK, MASK, COMP, SUP];
    v.extend(TAG_MARKERS);
    v
}

/// Canonical special spelling for `tok`, matched case-insensitively.
pub fn as_special(tok: &str) -> Option<&'static str> {
    if !tok.starts_with('[') || !tok.ends_with(']') {
        return None;
    }
    special_tokens().into_iter().find(|s| s.eq_ignore_ascii_case(tok))
}

/// Lower-cases ordinary tokens; special markers keep their canonical form.
pub fn normalize_token(tok: &str) -> String {
    match as_special(tok) {
        Some(s) => s.to_string(),
        None => tok.to_lowercase(),
    }
}

/// Whitespace tokenization of one document.
pub fn tokenize(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split_whitespace().map(normalize_token)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, TokenId>,
    num_specials: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from `(token, count)` pairs for ordinary tokens.
    /// Specials are prepended with the given counts (zero when absent).
    pub fn from_entries(
        entries: Vec<(String, u64)>,
        special_counts: &HashMap<String, u64>,
    ) -> Result<Self, CorpusError> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for s in special_tokens() {
            tokens.push(s.to_string());
            counts.push(special_counts.get(s).copied().unwrap_or(0));
        }
        let num_specials = tokens.len();
        for (t, c) in entries {
            if as_special(&t).is_some() {
                return Err(CorpusError::Format(format!("special token {t} listed as an ordinary entry")));
            }
            tokens.push(t);
            counts.push(c);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(CorpusError::Format(format!("duplicate token {t}")));
            }
        }
        Ok(Vocabulary { tokens, counts, index, num_specials })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<TokenId> {
        self.index.get(tok).copied()
    }

    /// Id of a normalized token, falling back to `[UNK]`.
    pub fn id_or_unk(&self, tok: &str) -> TokenId {
        self.id(tok).unwrap_or_else(|| self.unk())
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn unk(&self) -> TokenId {
        self.index[UNK]
    }

    pub fn mask(&self) -> TokenId {
        self.index[MASK]
    }

    pub fn num_specials(&self) -> usize {
        self.num_specials
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < self.num_specials
    }

    /// Ids eligible as random replacements.
    pub fn ordinary_ids(&self) -> Range<TokenId> {
        self.num_specials as TokenId..self.tokens.len() as TokenId
    }

    pub fn encode(&self, line: &str) -> Vec<TokenId> {
        tokenize(line).map(|t| self.id_or_unk(&t)).collect()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, toks: &[S]) -> Vec<TokenId> {
        toks.iter().map(|t| self.id_or_unk(&normalize_token(t.as_ref()))).collect()
    }
}

/// Per-token sense counts laid out as contiguous blocks of one global axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SenseInventory {
    counts: Vec<u32>,
    offsets: Vec<usize>,
}

impl SenseInventory {
    pub fn from_counts(counts: Vec<u32>) -> Result<Self, CorpusError> {
        if let Some(i) = counts.iter().position(|&k| k == 0) {
            return Err(CorpusError::Config(format!("token {i} has zero senses")));
        }
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for &k in &counts {
            acc += k as usize;
            offsets.push(acc);
        }
        Ok(SenseInventory { counts, offsets })
    }

    /// Every token owns a single sense.
    pub fn unit(vocab_size: usize) -> Self {
        Self::from_counts(vec![1; vocab_size]).expect("unit blocks are valid")
    }

    pub fn num_tokens(&self) -> usize {
        self.counts.len()
    }

    /// |S|.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn senses(&self, tok: TokenId) -> Range<usize> {
        let t = tok as usize;
        self.offsets[t]..self.offsets[t + 1]
    }

    pub fn sense_count(&self, tok: TokenId) -> usize {
        self.counts[tok as usize] as usize
    }

    pub fn offset(&self, tok: TokenId) -> usize {
        self.offsets[tok as usize]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Token whose block contains `sense`.
    pub fn owner(&self, sense: usize) -> TokenId {
        assert!(sense < self.total(), "sense {sense} out of range");
        (self.offsets.partition_point(|&o| o <= sense) - 1) as TokenId
    }

    pub fn multi_sense_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.counts.iter().enumerate().filter(|(_, &k)| k > 1).map(|(i, _)| i as TokenId)
    }
}

#[derive(Clone, Debug)]
pub struct VocabConfig {
    /// Tokens must occur strictly more often than this to be kept.
    pub min_count: u64,
    /// Tokens occurring strictly more often than this get `senses_per_word`.
    pub multi_sense_min_count: u64,
    pub senses_per_word: u32,
    /// Always kept, always multi-sense.
    pub focus: Vec<String>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { min_count: 500, multi_sense_min_count: 20_000, senses_per_word: 8, focus: Vec::new() }
    }
}

/// Counts tokens over documents and applies the frequency thresholds.
pub fn build_vocabulary<I, S>(docs: I, cfg: &VocabConfig) -> Result<(Vocabulary, SenseInventory), CorpusError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if cfg.min_count > cfg.multi_sense_min_count {
        return Err(CorpusError::Config(format!(
            "min_count {} exceeds multi_sense_min_count {}",
            cfg.min_count, cfg.multi_sense_min_count
        )));
    }
    if cfg.senses_per_word == 0 {
        return Err(CorpusError::Config("senses_per_word must be at least 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut special_counts: HashMap<String, u64> = HashMap::new();
    let mut total = 0u64;
    for doc in docs {
        for tok in tokenize(doc.as_ref()) {
            total += 1;
            if as_special(&tok).is_some() {
                *special_counts.entry(tok).or_default() += 1;
            } else {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    if total == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let focus: Vec<String> = cfg.focus.iter().map(|f| normalize_token(f)).collect();
    let mut kept: Vec<(String, u64)> =
        counts.iter().filter(|(t, &c)| c > cfg.min_count || focus.contains(t)).map(|(t, &c)| (t.clone(), c)).collect();
    for f in &focus {
        if as_special(f).is_none() && !counts.contains_key(f) {
            kept.push((f.clone(), 0));
        }
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if kept.is_empty() {
        log::warn!("no token exceeds min_count {}; vocabulary holds specials only", cfg.min_count);
    }
    let sense_counts: Vec<u32> = special_tokens()
        .iter()
        .map(|_| 1)
        .chain(kept.iter().map(|(t, c)| {
            if *c > cfg.multi_sense_min_count || focus.contains(t) {
                cfg.senses_per_word
            } else {
                1
            }
        }))
        .collect();
    let vocab = Vocabulary::from_entries(kept, &special_counts)?;
    let inventory = SenseInventory::from_counts(sense_counts)?;
    Ok((vocab, inventory))
}

/// Writes `token<TAB>count<TAB>sense_count` lines in id order.
pub fn write_vocab_file<W: Write>(mut w: W, vocab: &Vocabulary, inv: &SenseInventory) -> std::io::Result<()> {
    for id in 0..vocab.len() as TokenId {
        writeln!(w, "{}\t{}\t{}", vocab.token(id), vocab.count(id), inv.sense_count(id))?;
    }
    Ok(())
}

pub fn read_vocab_file<R: BufRead>(r: R) -> Result<(Vocabulary, SenseInventory), CorpusError> {
    let specials = special_tokens();
    let mut entries = Vec::new();
    let mut special_counts = HashMap::new();
    let mut senses = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let bad = || CorpusError::Format(format!("vocabulary line {}: expected token, count, sense count", n + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let count: u64 = parts[1].parse().map_err(|_| bad())?;
        let k: u32 = parts[2].parse().map_err(|_| bad())?;
        if n < specials.len() {
            if parts[0] != specials[n] {
                return Err(CorpusError::Format(format!(
                    "vocabulary line {}: expected special {} first",
                    n + 1,
                    specials[n]
                )));
            }
            if k != 1 {
                return Err(CorpusError::Format(format!("special {} must have one sense", parts[0])));
            }
            special_counts.insert(parts[0].to_string(), count);
        } else {
            entries.push((parts[0].to_string(), count));
        }
        senses.push(k);
    }
    if senses.len() < specials.len() {
        return Err(CorpusError::Format("vocabulary file is missing special tokens".into()));
    }
    let vocab = Vocabulary::from_entries(entries, &special_counts)?;
    let inv = SenseInventory::from_counts(senses)?;
    Ok((vocab, inv))
}
