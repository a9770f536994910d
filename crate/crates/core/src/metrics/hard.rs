use std::collections::HashMap;

use super::MetricError;

/// Joint counts of two hard clusterings over the same instances.
#[derive(Clone, Debug)]
pub struct Contingency {
    /// `cells[k][c]`: instances in induced cluster `k` and gold class `c`.
    pub cells: Vec<Vec<u64>>,
    pub n: u64,
}

impl Contingency {
    pub fn new<K: std::hash::Hash + Eq, C: std::hash::Hash + Eq>(labels: &[K], gold: &[C]) -> Self {
        assert_eq!(labels.len(), gold.len(), "clusterings cover different instance counts");
        let mut ki: HashMap<&K, usize> = HashMap::new();
        let mut ci: HashMap<&C, usize> = HashMap::new();
        let mut pairs = Vec::with_capacity(labels.len());
        for (k, c) in labels.iter().zip(gold) {
            let nk = ki.len();
            let k = *ki.entry(k).or_insert(nk);
            let nc = ci.len();
            let c = *ci.entry(c).or_insert(nc);
            pairs.push((k, c));
        }
        let mut cells = vec![vec![0u64; ci.len()]; ki.len()];
        for (k, c) in pairs {
            cells[k][c] += 1;
        }
        Contingency { cells, n: labels.len() as u64 }
    }

    fn row_sums(&self) -> Vec<u64> {
        self.cells.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        let cols = self.cells.first().map_or(0, Vec::len);
        (0..cols).map(|c| self.cells.iter().map(|r| r[c]).sum()).collect()
    }
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity, completeness and their harmonic mean. A zero-entropy side
/// counts as fully homogeneous or complete.
pub fn v_measure_parts<K, C>(labels: &[K], gold: &[C]) -> Result<(f64, f64, f64), MetricError>
where
    K: std::hash::Hash + Eq,
    C: std::hash::Hash + Eq,
{
    if labels.is_empty() {
        return Err(MetricError::Input("V-Measure needs at least one instance".into()));
    }
    if labels.len() != gold.len() {
        return Err(MetricError::Input("labeling and gold differ in length".into()));
    }
    let t = Contingency::new(labels, gold);
    let n = t.n as f64;
    let (rows, cols) = (t.row_sums(), t.col_sums());
    let h_c = entropy(&cols, n);
    let h_k = entropy(&rows, n);
    let mut h_c_given_k = 0.0;
    let mut h_k_given_c = 0.0;
    for (k, row) in t.cells.iter().enumerate() {
        for (c, &a) in row.iter().enumerate() {
            if a == 0 {
                continue;
            }
            let a = a as f64;
            h_c_given_k -= a / n * (a / rows[k] as f64).ln();
            h_k_given_c -= a / n * (a / cols[c] as f64).ln();
        }
    }
    let h = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let c = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    let v = if h + c == 0.0 { 0.0 } else { 2.0 * h * c / (h + c) };
    Ok((h, c, v))
}

pub fn v_measure<K, C>(labels: &[K], gold: &[C]) -> Result<f64, MetricError>
where
    K: std::hash::Hash + Eq,
    C: std::hash::Hash + Eq,
{
    Ok(v_measure_parts(labels, gold)?.2)
}

fn pairs(x: u64) -> u64 {
    x * x.saturating_sub(1) / 2
}

/// F1 of "same cluster" instance pairs. Zero predicted (or gold) pairs give
/// precision (or recall) 0, unless neither side has any pair, which counts
/// as perfect agreement.
pub fn paired_f_score<K, C>(labels: &[K], gold: &[C]) -> Result<f64, MetricError>
where
    K: std::hash::Hash + Eq,
    C: std::hash::Hash + Eq,
{
    if labels.len() < 2 {
        return Err(MetricError::Input("paired F-Score needs at least two instances".into()));
    }
    if labels.len() != gold.len() {
        return Err(MetricError::Input("labeling and gold differ in length".into()));
    }
    let t = Contingency::new(labels, gold);
    let predicted: u64 = t.row_sums().into_iter().map(pairs).sum();
    let actual: u64 = t.col_sums().into_iter().map(pairs).sum();
    let common: u64 = t.cells.iter().flatten().map(|&a| pairs(a)).sum();
    if predicted == 0 && actual == 0 {
        return Ok(1.0);
    }
    let p = if predicted == 0 { 0.0 } else { common as f64 / predicted as f64 };
    let r = if actual == 0 { 0.0 } else { common as f64 / actual as f64 };
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}
