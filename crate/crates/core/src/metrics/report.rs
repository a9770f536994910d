use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::str::FromStr;

use super::fuzzy::{fuzzy_b_cubed, fuzzy_nmi, memberships};
use super::hard::{paired_f_score, v_measure};
use super::MetricError;

/// Word used for the corpus-level row.
pub const ALL: &str = "__ALL__";

/// One labeled instance from a labeling or gold file.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInstance {
    pub id: String,
    pub lemma: String,
    pub labels: Vec<(String, f64)>,
}

impl LabeledInstance {
    /// The highest-weight label; ties go to the first listed.
    pub fn top_label(&self) -> &str {
        let mut best = &self.labels[0];
        for l in &self.labels[1..] {
            if l.1 > best.1 {
                best = l;
            }
        }
        &best.0
    }
}

/// Reads `id<TAB>lemma<TAB>label[/weight][,label[/weight]...]` lines; a
/// missing weight is 1.
pub fn read_labeling<R: BufRead>(r: R) -> Result<Vec<LabeledInstance>, MetricError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| MetricError::Format(format!("line {}: {m}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad("expected 3 tab-separated fields".into()));
        }
        let mut labels = Vec::new();
        for item in f[2].split(',').filter(|s| !s.is_empty()) {
            let (label, w) = match item.rsplit_once('/') {
                Some((l, w)) => (l, w.parse::<f64>().map_err(|_| bad(format!("bad weight in {item:?}")))?),
                None => (item, 1.0),
            };
            if !(w > 0.0 && w.is_finite()) {
                return Err(bad(format!("weight in {item:?} must be positive")));
            }
            labels.push((label.to_string(), w));
        }
        if labels.is_empty() {
            return Err(bad("no labels".into()));
        }
        if !seen.insert(f[0].to_string()) {
            return Err(bad(format!("duplicate instance id {}", f[0])));
        }
        out.push(LabeledInstance { id: f[0].to_string(), lemma: f[1].to_string(), labels });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskStyle {
    /// Hard labels: paired F-Score and V-Measure.
    Hard2010,
    /// Weighted labels: fuzzy B-Cubed and fuzzy NMI.
    Fuzzy2013,
}

impl FromStr for TaskStyle {
    type Err = MetricError;
    fn from_str(s: &str) -> Result<Self, MetricError> {
        match s {
            "2010" => Ok(TaskStyle::Hard2010),
            "2013" => Ok(TaskStyle::Fuzzy2013),
            _ => Err(MetricError::Input(format!("unknown task style {s:?} (expected 2010 or 2013)"))),
        }
    }
}

impl TaskStyle {
    pub fn metric_names(self) -> [&'static str; 2] {
        match self {
            TaskStyle::Hard2010 => ["F-S", "V-M"],
            TaskStyle::Fuzzy2013 => ["FBC", "FNMI"],
        }
    }
}

/// Geometric mean of two sub-metrics.
pub fn avg(a: f64, b: f64) -> f64 {
    (a * b).sqrt()
}

/// Metric values on the 0–100 scale, per focus word and macro-averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub style: TaskStyle,
    /// word → (metric 1, metric 2), sorted by word.
    pub per_word: BTreeMap<String, (f64, f64)>,
    pub corpus: (f64, f64),
}

impl EvalReport {
    pub fn avg(&self) -> f64 {
        avg(self.corpus.0, self.corpus.1)
    }

    /// Plain-text table.
    pub fn table(&self) -> String {
        let [m1, m2] = self.style.metric_names();
        let mut s = String::new();
        let _ = writeln!(s, "# scale 0-100; AVG is the geometric mean of {m1} and {m2}");
        let _ = writeln!(s, "# zero-denominator conventions: precision/recall-like terms 0, empty-entropy sides 1,");
        let _ = writeln!(s, "# labelings with no co-clustered pairs on either side agree perfectly");
        let _ = writeln!(s, "{:<20} {:>8} {:>8} {:>8}", "word", m1, m2, "AVG");
        let rows = self.per_word.iter().map(|(w, v)| (w.as_str(), *v)).chain([(ALL, self.corpus)]);
        for (w, (a, b)) in rows {
            let _ = writeln!(s, "{:<20} {:>8.1} {:>8.1} {:>8.1}", w, a, b, avg(a, b));
        }
        s
    }

    /// `metric<TAB>word<TAB>value` lines, corpus row last.
    pub fn tsv(&self) -> String {
        let [m1, m2] = self.style.metric_names();
        let mut s = String::new();
        let rows = self.per_word.iter().map(|(w, v)| (w.as_str(), *v)).chain([(ALL, self.corpus)]);
        for (w, (a, b)) in rows {
            let _ = writeln!(s, "{m1}\t{w}\t{a}");
            let _ = writeln!(s, "{m2}\t{w}\t{b}");
            let _ = writeln!(s, "AVG\t{w}\t{}", avg(a, b));
        }
        s
    }
}

/// Scores a labeling against gold, per focus word, then macro-averages.
/// Both sides must cover exactly the same instance ids.
pub fn evaluate(
    labeling: &[LabeledInstance],
    gold: &[LabeledInstance],
    style: TaskStyle,
) -> Result<EvalReport, MetricError> {
    let gold_by_id: HashMap<&str, &LabeledInstance> = gold.iter().map(|g| (g.id.as_str(), g)).collect();
    let label_ids: HashSet<&str> = labeling.iter().map(|l| l.id.as_str()).collect();
    let mut offenders: Vec<String> = labeling
        .iter()
        .filter(|l| !gold_by_id.contains_key(l.id.as_str()))
        .map(|l| format!("{} (labeling only)", l.id))
        .chain(gold.iter().filter(|g| !label_ids.contains(g.id.as_str())).map(|g| format!("{} (gold only)", g.id)))
        .collect();
    if !offenders.is_empty() {
        let total = offenders.len();
        offenders.truncate(10);
        return Err(MetricError::Mismatch { total, first: offenders });
    }
    if labeling.is_empty() {
        return Err(MetricError::Input("no instances to score".into()));
    }
    let mut by_word: BTreeMap<&str, Vec<(&LabeledInstance, &LabeledInstance)>> = BTreeMap::new();
    for l in labeling {
        let g = gold_by_id[l.id.as_str()];
        by_word.entry(g.lemma.as_str()).or_default().push((l, g));
    }
    let mut per_word = BTreeMap::new();
    for (word, items) in by_word {
        let v = score(&items, style).map_err(|e| MetricError::Input(format!("word {word}: {e}")))?;
        per_word.insert(word.to_string(), (100.0 * v.0, 100.0 * v.1));
    }
    let n = per_word.len() as f64;
    let corpus = (per_word.values().map(|v| v.0).sum::<f64>() / n, per_word.values().map(|v| v.1).sum::<f64>() / n);
    Ok(EvalReport { style, per_word, corpus })
}

fn score(items: &[(&LabeledInstance, &LabeledInstance)], style: TaskStyle) -> Result<(f64, f64), MetricError> {
    match style {
        TaskStyle::Hard2010 => {
            let l: Vec<&str> = items.iter().map(|(l, _)| l.top_label()).collect();
            let g: Vec<&str> = items.iter().map(|(_, g)| g.top_label()).collect();
            let fs = if l.len() < 2 { 1.0 } else { paired_f_score(&l, &g)? };
            Ok((fs, v_measure(&l, &g)?))
        }
        TaskStyle::Fuzzy2013 => {
            let l = memberships(&items.iter().map(|(l, _)| l.labels.clone()).collect::<Vec<_>>())?;
            let g = memberships(&items.iter().map(|(_, g)| g.labels.clone()).collect::<Vec<_>>())?;
            let fbc = if l.len() < 2 { 1.0 } else { fuzzy_b_cubed(&l, &g)? };
            Ok((fbc, fuzzy_nmi(&l, &g)?))
        }
    }
}
