//! Vocabulary, lemma splitting, masking and pseudoword construction.

mod lemma;
mod masking;
mod pseudo;
mod synth;
mod vocab;

use std::io::{BufRead, Write};

pub use lemma::{apply_lemma_splits, inflection_marker, read_tagged_corpus, LemmaSplit, TaggedToken};
pub use masking::{make_masked_batch, pack_sequences, MaskAction, MaskedBatch, MaskingConfig, Target};
pub use pseudo::{synthesize_pseudowords, EvalInstance, PseudowordSpec, PseudowordSplit, MIN_TRAIN_OCCURRENCES};
pub use synth::{topic_corpus, topic_pseudoword_specs, topic_words, Topic, TopicCorpus, TopicCorpusConfig};
pub use vocab::{
    as_special, build_vocabulary, normalize_token, read_vocab_file, special_tokens, tokenize, write_vocab_file,
    SenseInventory, TokenId, VocabConfig, Vocabulary, COMP, MASK, PAD, SUP, TAG_MARKERS, UNK,
};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("token {token} keeps only {found} training occurrences (need {})", MIN_TRAIN_OCCURRENCES)]
    InsufficientOccurrences { token: String, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads one document per line as normalized tokens; blank lines are skipped.
pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<Vec<String>>, CorpusError> {
    let mut docs = Vec::new();
    for line in r.lines() {
        let toks: Vec<String> = tokenize(&line?).collect();
        if !toks.is_empty() {
            docs.push(toks);
        }
    }
    Ok(docs)
}

pub fn write_corpus<W: Write, S: AsRef<str>>(mut w: W, docs: &[Vec<S>]) -> std::io::Result<()> {
    for doc in docs {
        let line: Vec<&str> = doc.iter().map(AsRef::as_ref).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}
