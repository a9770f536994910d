//! Splitting of inflected tokens into lemma plus inflection marker.
//!
//! Tagging is external: input arrives as `(surface, lemma, tag)` triples.

use std::io::BufRead;

use super::vocab::{as_special, COMP, SUP};
use super::CorpusError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedToken {
    pub surface: String,
    pub lemma: String,
    pub tag: String,
}

impl TaggedToken {
    pub fn new(surface: &str, lemma: &str, tag: &str) -> Self {
        TaggedToken { surface: surface.into(), lemma: lemma.into(), tag: tag.into() }
    }
}

/// Penn Treebank tags (plus common punctuation tags) accepted as input.
const KNOWN_TAGS: &[&str] = &[
    "CC", "CD", "DT", "EX", "FW", "IN", "JJ", "JJR", "JJS", "LS", "MD", "NN", "NNS", "NNP", "NNPS", "PDT", "POS",
    "PRP", "PRP$", "RB", "RBR", "RBS", "RP", "SYM", "TO", "UH", "VB", "VBD", "VBG", "VBN", "VBP", "VBZ", "WDT", "WP",
    "WP$", "WRB", ".", ",", ":", "``", "''", "-LRB-", "-RRB-", "#", "$", "HYPH", "NFP", "ADD", "AFX", "GW", "XX",
];

/// Marker emitted after the lemma of a token carrying `tag`, if the tag
/// marks inflection. `VNB` is accepted as a spelling of `VBN`.
pub fn inflection_marker(tag: &str) -> Option<&'static str> {
    Some(match tag {
        "NNS" => "[NNS]",
        "JJR" | "RBR" => COMP,
        "JJS" | "RBS" => SUP,
        "VBD" => "[VBD]",
        "VBG" => "[VBG]",
        "VBN" | "VNB" => "[VBN]",
        "VBP" => "[VBP]",
        "VBZ" => "[VBZ]",
        _ => return None,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LemmaSplit {
    pub tokens: Vec<String>,
    /// Tokens whose tag was outside the known tag set (passed through).
    pub unknown_tags: usize,
}

pub fn apply_lemma_splits(tagged: &[TaggedToken]) -> LemmaSplit {
    let mut out = LemmaSplit::default();
    for t in tagged {
        if let Some(s) = as_special(&t.surface) {
            out.tokens.push(s.to_string());
            continue;
        }
        if let Some(marker) = inflection_marker(&t.tag) {
            out.tokens.push(t.lemma.to_lowercase());
            out.tokens.push(marker.to_string());
            continue;
        }
        if !KNOWN_TAGS.contains(&t.tag.as_str()) {
            out.unknown_tags += 1;
        }
        out.tokens.push(t.surface.to_lowercase());
    }
    if out.unknown_tags > 0 {
        log::warn!("{} tokens carried unknown tags and were passed through", out.unknown_tags);
    }
    out
}

/// Reads `surface<TAB>lemma<TAB>tag` lines; blank lines separate documents.
pub fn read_tagged_corpus<R: BufRead>(r: R) -> Result<Vec<Vec<TaggedToken>>, CorpusError> {
    let mut docs = Vec::new();
    let mut cur = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(CorpusError::Format(format!("tagged corpus line {}: expected 3 tab-separated fields", n + 1)));
        }
        cur.push(TaggedToken::new(parts[0], parts[1], parts[2]));
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    Ok(docs)
}
