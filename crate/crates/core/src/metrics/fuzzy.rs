use std::collections::HashMap;

use super::MetricError;

/// Per-instance label distribution: (label index, weight), weights summing
/// to one.
pub type Membership = Vec<(usize, f64)>;

/// Interns string labels and normalizes weights to per-instance
/// distributions.
pub fn memberships(rows: &[Vec<(String, f64)>]) -> Result<Vec<Membership>, MetricError> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            if row.is_empty() || row.iter().any(|(_, w)| !(*w > 0.0 && w.is_finite())) {
                return Err(MetricError::Input(format!("instance {i} has no positive label weights")));
            }
            let mut m: Membership = Vec::with_capacity(row.len());
            for (l, w) in row {
                let n = index.len();
                let id = *index.entry(l.as_str()).or_insert(n);
                match m.iter_mut().find(|(x, _)| *x == id) {
                    Some(e) => e.1 += w / total,
                    None => m.push((id, w / total)),
                }
            }
            Ok(m)
        })
        .collect()
}

fn overlap(a: &Membership, b: &Membership) -> f64 {
    a.iter().map(|&(l, wa)| b.iter().find(|&&(m, _)| m == l).map_or(0.0, |&(_, wb)| wa.min(wb))).sum()
}

/// Fuzzy B-Cubed F-score over pairs of distinct instances. The overlap of
/// two instances on one side is Σ_label min(weight_i, weight_j); a pair's
/// precision is min(ov_labels, ov_gold) / ov_labels, its recall the same
/// over ov_gold. Per-instance averages run over partners with positive
/// overlap; instances without partners are skipped.
pub fn fuzzy_b_cubed(labels: &[Membership], gold: &[Membership]) -> Result<f64, MetricError> {
    let (p, r) = fuzzy_b_cubed_pr(labels, gold)?;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

pub fn fuzzy_b_cubed_pr(labels: &[Membership], gold: &[Membership]) -> Result<(f64, f64), MetricError> {
    if labels.len() != gold.len() {
        return Err(MetricError::Input("labeling and gold differ in length".into()));
    }
    if labels.len() < 2 {
        return Err(MetricError::Input("fuzzy B-Cubed needs at least two instances".into()));
    }
    let n = labels.len();
    let (mut p_sum, mut p_n, mut r_sum, mut r_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        let (mut pi, mut pc, mut ri, mut rc) = (0.0, 0usize, 0.0, 0usize);
        for j in (0..n).filter(|&j| j != i) {
            let ol = overlap(&labels[i], &labels[j]);
            let og = overlap(&gold[i], &gold[j]);
            if ol > 0.0 {
                pi += ol.min(og) / ol;
                pc += 1;
            }
            if og > 0.0 {
                ri += ol.min(og) / og;
                rc += 1;
            }
        }
        if pc > 0 {
            p_sum += pi / pc as f64;
            p_n += 1;
        }
        if rc > 0 {
            r_sum += ri / rc as f64;
            r_n += 1;
        }
    }
    if p_n == 0 && r_n == 0 {
        return Ok((1.0, 1.0));
    }
    let p = if p_n == 0 { 0.0 } else { p_sum / p_n as f64 };
    let r = if r_n == 0 { 0.0 } else { r_sum / r_n as f64 };
    Ok((p, r))
}

/// Mutual information between the label variables of two memberships, with
/// an instance drawn uniformly and each side's label drawn from its
/// distribution independently given the instance.
fn fuzzy_mi(a: &[Membership], b: &[Membership]) -> f64 {
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pa: HashMap<usize, f64> = HashMap::new();
    let mut pb: HashMap<usize, f64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        for &(k, wk) in x {
            *pa.entry(k).or_default() += wk / n;
            for &(c, wc) in y {
                *joint.entry((k, c)).or_default() += wk * wc / n;
            }
        }
        for &(c, wc) in y {
            *pb.entry(c).or_default() += wc / n;
        }
    }
    let mut keys: Vec<_> = joint.into_iter().collect();
    keys.sort_by_key(|&(k, _)| k);
    keys.iter().filter(|(_, p)| *p > 0.0).map(|&((k, c), p)| p * (p / (pa[&k] * pb[&c])).ln()).sum::<f64>().max(0.0)
}

/// Fuzzy NMI: I(A;B) / sqrt(I(A;A') · I(B;B')), where A' is a second
/// independent draw from the same memberships. On hard clusterings the
/// self-information terms are the entropies, so this is the usual
/// geometric-mean NMI. Two constant labelings agree perfectly (1); one
/// constant side gives 0.
pub fn fuzzy_nmi(labels: &[Membership], gold: &[Membership]) -> Result<f64, MetricError> {
    if labels.len() != gold.len() {
        return Err(MetricError::Input("labeling and gold differ in length".into()));
    }
    if labels.is_empty() {
        return Err(MetricError::Input("fuzzy NMI needs at least one instance".into()));
    }
    let ia = fuzzy_mi(labels, labels);
    let ib = fuzzy_mi(gold, gold);
    const EPS: f64 = 1e-15;
    if ia < EPS && ib < EPS {
        return Ok(1.0);
    }
    if ia < EPS || ib < EPS {
        return Ok(0.0);
    }
    Ok((fuzzy_mi(labels, gold) / (ia * ib).sqrt()).clamp(0.0, 1.0))
}
