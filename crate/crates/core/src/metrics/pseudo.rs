use std::collections::BTreeMap;

use super::MetricError;

/// Accuracy of induced senses against pseudoword sources under the best
/// sense → source mapping. Several senses may map to one source, so the
/// optimum sends each sense to its most frequent source (ties to the
/// smallest source).
pub fn pseudoword_accuracy<S: Ord + Clone>(
    senses: &[usize],
    sources: &[S],
) -> Result<(f64, BTreeMap<usize, S>), MetricError> {
    if senses.len() != sources.len() {
        return Err(MetricError::Input("labels and sources differ in length".into()));
    }
    if senses.is_empty() {
        return Err(MetricError::Input("no instances to score".into()));
    }
    let mut counts: BTreeMap<usize, BTreeMap<&S, usize>> = BTreeMap::new();
    for (s, src) in senses.iter().zip(sources) {
        *counts.entry(*s).or_default().entry(src).or_default() += 1;
    }
    let mut mapping = BTreeMap::new();
    let mut correct = 0usize;
    for (sense, by_src) in counts {
        let (src, n) = by_src.into_iter().fold((None, 0), |best, (s, n)| if n > best.1 { (Some(s), n) } else { best });
        correct += n;
        mapping.insert(sense, src.expect("non-empty sense").clone());
    }
    Ok((correct as f64 / senses.len() as f64, mapping))
}
