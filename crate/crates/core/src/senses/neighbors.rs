use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use crate::model::PolyLm;

use super::usage::SenseUsage;
use super::SenseError;
use crate::corpus::TokenId;

/// Labeled sense vectors, either taken from a model or read from an export.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseTable {
    /// Owning word of each row.
    pub words: Vec<String>,
    /// Index of each row within its word's block.
    pub sense_idx: Vec<usize>,
    pub dim: usize,
    pub vectors: Vec<f32>,
}

impl SenseTable {
    pub fn from_model(model: &PolyLm) -> Self {
        let e = model.sense_embeddings();
        let inv = &model.inventory;
        let (words, sense_idx) = (0..inv.total())
            .map(|s| {
                let w = inv.owner(s);
                (model.vocab.token(w).to_string(), s - inv.offset(w))
            })
            .unzip();
        SenseTable { words, sense_idx, dim: model.config.d_model, vectors: e.data().to_vec() }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Row index of `word.sense`.
    pub fn find(&self, word: &str, sense: usize) -> Option<usize> {
        (0..self.len()).find(|&i| self.words[i] == word && self.sense_idx[i] == sense)
    }

    /// Cosine similarity between two rows, accumulated in f64.
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.row(a), self.row(b));
        let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
        let nx = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        let ny = y.iter().map(|&q| (q as f64).powi(2)).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            0.0
        } else {
            dot / (nx * ny)
        }
    }

    /// The `top_n` most similar rows to `query`, skipping every row owned by
    /// the query's word. Descending similarity, ties by row index.
    pub fn neighbors(&self, query: usize, top_n: usize) -> Result<Vec<(usize, f64)>, SenseError> {
        if query >= self.len() {
            return Err(SenseError::Config(format!("sense {query} outside 0..{}", self.len())));
        }
        let own = &self.words[query];
        let mut sims: Vec<(usize, f64)> =
            (0..self.len()).filter(|&i| &self.words[i] != own).map(|i| (i, self.similarity(query, i))).collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sims.truncate(top_n);
        Ok(sims)
    }

    /// Writes `word<TAB>sense_idx<TAB>v1<TAB>...<TAB>vd` for the rows whose
    /// word is in `scope` (all rows when `scope` is `None`). Returns the row
    /// count.
    pub fn export<W: Write>(&self, mut w: W, scope: Option<&[String]>) -> Result<usize, SenseError> {
        let mut n = 0;
        for i in 0..self.len() {
            if scope.is_some_and(|s| !s.contains(&self.words[i])) {
                continue;
            }
            write!(w, "{}\t{}", self.words[i], self.sense_idx[i])?;
            for v in self.row(i) {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn import<R: BufRead>(r: R) -> Result<Self, SenseError> {
        let mut t = SenseTable { words: Vec::new(), sense_idx: Vec::new(), dim: 0, vectors: Vec::new() };
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| SenseError::Format(format!("line {}: {m}", n + 1));
            let mut f = line.split('\t');
            let word = f.next().ok_or_else(|| bad("missing word"))?;
            let idx = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad sense index"))?;
            let vals: Vec<f32> = f.map(str::parse).collect::<Result<_, _>>().map_err(|_| bad("bad float"))?;
            if t.words.is_empty() {
                t.dim = vals.len();
            }
            if vals.len() != t.dim || vals.is_empty() {
                return Err(bad("inconsistent vector width"));
            }
            t.words.push(word.to_string());
            t.sense_idx.push(idx);
            t.vectors.extend(vals);
        }
        Ok(t)
    }
}

/// Writes `word<TAB>sense_idx<TAB>argmax_share` for every dead sense.
pub fn write_dead_senses<W: Write>(
    mut w: W,
    model: &PolyLm,
    usage: &BTreeMap<TokenId, SenseUsage>,
    threshold: f64,
) -> std::io::Result<usize> {
    let mut n = 0;
    for u in usage.values() {
        for s in u.dead(threshold) {
            writeln!(w, "{}\t{s}\t{}", model.vocab.token(u.word), u.argmax_share[s])?;
            n += 1;
        }
    }
    Ok(n)
}

/// Reads a dead-sense sidecar into word → dead sense indices.
pub fn read_dead_senses<R: BufRead>(r: R) -> Result<HashMap<String, Vec<usize>>, SenseError> {
    let mut out: HashMap<String, Vec<usize>> = HashMap::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split('\t').collect();
        let idx = f.get(1).and_then(|s| s.parse().ok());
        match (f.first(), idx) {
            (Some(w), Some(i)) => out.entry(w.to_string()).or_default().push(i),
            _ => return Err(SenseError::Format(format!("line {}: expected word and sense index", n + 1))),
        }
    }
    Ok(out)
}
