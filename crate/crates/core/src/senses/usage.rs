use std::collections::BTreeMap;

use crate::corpus::TokenId;
use crate::model::PolyLm;

use super::wsi::{argmax, focus_sense_distributions, WsiInstance};
use super::SenseError;

/// Default argmax share below which a sense counts as dead.
pub const DEAD_SHARE: f64 = 0.01;

/// How one word's senses are used over a sample of occurrences.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseUsage {
    pub word: TokenId,
    pub occurrences: usize,
    /// Fraction of occurrences where each sense is the argmax of q^P.
    pub argmax_share: Vec<f64>,
    /// Mean q^P of each sense.
    pub mean_prob: Vec<f64>,
}

impl SenseUsage {
    pub fn dead(&self, threshold: f64) -> Vec<usize> {
        (0..self.argmax_share.len()).filter(|&s| self.argmax_share[s] < threshold).collect()
    }
}

/// Usage of every word that occurs in `instances`, keyed by token id.
pub fn usage_from_instances(
    model: &PolyLm,
    instances: &[WsiInstance],
) -> Result<BTreeMap<TokenId, SenseUsage>, SenseError> {
    if instances.is_empty() {
        return Err(SenseError::Config("usage statistics need a non-empty sample".into()));
    }
    let dists = focus_sense_distributions(model, instances)?;
    let mut acc: BTreeMap<TokenId, SenseUsage> = BTreeMap::new();
    for (inst, d) in instances.iter().zip(dists) {
        let Ok(q) = d else { continue };
        let word = model.vocab.id(&crate::corpus::normalize_token(&inst.lemma)).expect("resolved focus");
        let u = acc.entry(word).or_insert_with(|| SenseUsage {
            word,
            occurrences: 0,
            argmax_share: vec![0.0; q.len()],
            mean_prob: vec![0.0; q.len()],
        });
        u.occurrences += 1;
        u.argmax_share[argmax(&q)] += 1.0;
        for (m, p) in u.mean_prob.iter_mut().zip(&q) {
            *m += p;
        }
    }
    for u in acc.values_mut() {
        let n = u.occurrences as f64;
        u.argmax_share.iter_mut().for_each(|x| *x /= n);
        u.mean_prob.iter_mut().for_each(|x| *x /= n);
    }
    Ok(acc)
}

/// Usage of the multi-sense words over every occurrence in `docs`, each
/// occurrence masked on its own. Documents are center-cropped to the model's
/// window. At most `max_per_word` occurrences per word are used.
pub fn sense_usage_stats(
    model: &PolyLm,
    docs: &[Vec<String>],
    max_per_word: usize,
) -> Result<BTreeMap<TokenId, SenseUsage>, SenseError> {
    let mut per_word: BTreeMap<TokenId, usize> = BTreeMap::new();
    let mut instances = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        for (pos, tok) in doc.iter().enumerate() {
            let Some(id) = model.vocab.id(&crate::corpus::normalize_token(tok)) else { continue };
            if model.inventory.sense_count(id) < 2 {
                continue;
            }
            let n = per_word.entry(id).or_insert(0);
            if *n >= max_per_word {
                continue;
            }
            *n += 1;
            instances.push(WsiInstance {
                id: format!("{d}.{pos}"),
                lemma: tok.clone(),
                position: pos,
                tokens: doc.clone(),
            });
        }
    }
    if instances.is_empty() {
        return Err(SenseError::Config("sample holds no multi-sense word occurrences".into()));
    }
    usage_from_instances(model, &instances)
}
