use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{normalize_token, MaskAction, MaskedBatch, Target, TokenId};
use crate::model::{ForwardOptions, PolyLm};

use super::SenseError;

/// Instances predicted together in one forward pass.
const CHUNK: usize = 16;

/// One passage with a marked focus word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WsiInstance {
    pub id: String,
    pub lemma: String,
    pub position: usize,
    pub tokens: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Single,
    Multi,
}

impl FromStr for Protocol {
    type Err = SenseError;
    fn from_str(s: &str) -> Result<Self, SenseError> {
        match s {
            "single" => Ok(Protocol::Single),
            "multi" => Ok(Protocol::Multi),
            _ => Err(SenseError::Format(format!("unknown protocol {s:?} (expected single or multi)"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Single => "single",
            Protocol::Multi => "multi",
        })
    }
}

/// Weighted sense labels for one instance. Sense indices are local to the
/// focus word's block.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseLabeling {
    pub id: String,
    pub lemma: String,
    pub labels: Vec<(usize, f64)>,
    pub protocol: Protocol,
}

impl SenseLabeling {
    /// `id<TAB>lemma<TAB>lemma.N/weight[,lemma.N/weight...]`
    pub fn to_line(&self) -> String {
        let labels: Vec<String> = self.labels.iter().map(|(s, w)| format!("{}.{s}/{w}", self.lemma)).collect();
        format!("{}\t{}\t{}", self.id, self.lemma, labels.join(","))
    }
}

/// A focus occurrence resolved against the vocabulary and cropped to fit.
#[derive(Clone, Debug)]
struct Query {
    ids: Vec<TokenId>,
    focus: usize,
    word: TokenId,
}

fn resolve(inst: &WsiInstance, model: &PolyLm) -> Result<Query, String> {
    if inst.position >= inst.tokens.len() {
        return Err(format!("focus position {} outside {} tokens", inst.position, inst.tokens.len()));
    }
    let lemma = normalize_token(&inst.lemma);
    let at = normalize_token(&inst.tokens[inst.position]);
    if at != lemma {
        return Err(format!("token {at:?} at the focus position is not the focus lemma {lemma:?}"));
    }
    let word = model.vocab.id(&lemma).ok_or_else(|| format!("focus lemma {lemma:?} is not in the vocabulary"))?;
    let ids = model.vocab.encode_tokens(&inst.tokens);
    let (ids, focus) = center_crop(&ids, inst.position, model.config.seq_len);
    Ok(Query { ids: ids.to_vec(), focus, word })
}

/// Window of at most `len` tokens around `focus`, and the focus's new index.
pub fn center_crop<T>(toks: &[T], focus: usize, len: usize) -> (&[T], usize) {
    if toks.len() <= len {
        return (toks, focus);
    }
    let start = focus.saturating_sub(len / 2).min(toks.len() - len);
    (&toks[start..start + len], focus - start)
}

/// q^P over the focus word's senses for each instance, with the focus (and
/// only the focus) replaced by `[MASK]`. Unresolvable instances yield an
/// error message instead.
pub fn focus_sense_distributions(
    model: &PolyLm,
    instances: &[WsiInstance],
) -> Result<Vec<Result<Vec<f64>, String>>, SenseError> {
    let queries: Vec<Result<Query, String>> = instances.iter().map(|i| resolve(i, model)).collect();
    let threads = inference_threads().min(queries.len().div_ceil(CHUNK)).max(1);
    let mut out: Vec<Result<Vec<f64>, String>> =
        queries.iter().map(|q| q.as_ref().map(|_| Vec::new()).map_err(Clone::clone)).collect();
    let chunks: Vec<(usize, usize)> =
        (0..queries.len()).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(queries.len()))).collect();
    let results: Vec<Result<Vec<(usize, Vec<f64>)>, SenseError>> = if threads <= 1 {
        chunks.iter().map(|&(s, e)| predict_chunk(model, &queries, s, e)).collect()
    } else {
        std::thread::scope(|scope| {
            let per = chunks.len().div_ceil(threads);
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| {
                    let queries = &queries;
                    scope.spawn(move || {
                        group.iter().map(|&(s, e)| predict_chunk(model, queries, s, e)).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("labeling thread panicked")).collect()
        })
    };
    for r in results {
        for (i, q) in r? {
            out[i] = Ok(q);
        }
    }
    Ok(out)
}

fn predict_chunk(
    model: &PolyLm,
    queries: &[Result<Query, String>],
    start: usize,
    end: usize,
) -> Result<Vec<(usize, Vec<f64>)>, SenseError> {
    let live: Vec<(usize, &Query)> = (start..end).filter_map(|i| queries[i].as_ref().ok().map(|q| (i, q))).collect();
    if live.is_empty() {
        return Ok(Vec::new());
    }
    let width = live.iter().map(|(_, q)| q.ids.len()).max().unwrap();
    let pad = model.vocab.pad();
    let rows: Vec<Vec<TokenId>> = live
        .iter()
        .map(|(_, q)| {
            let mut r = q.ids.clone();
            r.resize(width, pad);
            r
        })
        .collect();
    let targets =
        live.iter().enumerate().map(|(row, (_, q))| Target { row, pos: q.focus, action: MaskAction::Masked }).collect();
    let batch = MaskedBatch::with_targets(rows, targets, &model.vocab, &[])?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = model.forward(&batch, &ForwardOptions::inference(), &mut rng)?;
    // Targets are sorted by row, one per row.
    Ok(live
        .iter()
        .zip(f.outputs.q_p)
        .map(|((i, q), qp)| {
            debug_assert_eq!(qp.len(), model.inventory.sense_count(q.word));
            (*i, qp)
        })
        .collect())
}

/// Threads used for inference, from `POLYLM_THREADS` (default 1).
pub fn inference_threads() -> usize {
    std::env::var("POLYLM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Labels from a focus distribution under the given protocol.
pub fn labels_from(q: &[f64], protocol: Protocol, p_thresh: f64) -> Vec<(usize, f64)> {
    let best = argmax(q);
    match protocol {
        Protocol::Single => vec![(best, 1.0)],
        Protocol::Multi => {
            let over: Vec<(usize, f64)> = q.iter().copied().enumerate().filter(|&(_, p)| p > p_thresh).collect();
            if over.is_empty() {
                vec![(best, q[best])]
            } else {
                over
            }
        }
    }
}

/// Labels every instance. Unresolvable instances come back as
/// [`SenseError::Unresolvable`] in their slot.
pub fn label_instances(
    model: &PolyLm,
    instances: &[WsiInstance],
    protocol: Protocol,
    p_thresh: f64,
) -> Result<Vec<Result<SenseLabeling, SenseError>>, SenseError> {
    if protocol == Protocol::Multi && !(p_thresh > 0.0 && p_thresh < 1.0) {
        return Err(SenseError::Config(format!("p_thresh {p_thresh} outside (0, 1)")));
    }
    let dists = focus_sense_distributions(model, instances)?;
    Ok(instances
        .iter()
        .zip(dists)
        .map(|(inst, d)| match d {
            Ok(q) => Ok(SenseLabeling {
                id: inst.id.clone(),
                lemma: normalize_token(&inst.lemma),
                labels: labels_from(&q, protocol, p_thresh),
                protocol,
            }),
            Err(reason) => Err(SenseError::Unresolvable { id: inst.id.clone(), reason }),
        })
        .collect())
}

/// The sense with the highest q^P at the masked focus.
pub fn label_single(model: &PolyLm, inst: &WsiInstance) -> Result<SenseLabeling, SenseError> {
    label_instances(model, std::slice::from_ref(inst), Protocol::Single, 0.5)?.remove(0)
}

/// Every sense with q^P above `p_thresh`, weighted by its raw probability.
pub fn label_multi(model: &PolyLm, inst: &WsiInstance, p_thresh: f64) -> Result<SenseLabeling, SenseError> {
    label_instances(model, std::slice::from_ref(inst), Protocol::Multi, p_thresh)?.remove(0)
}

/// `instance_id<TAB>focus_lemma<TAB>focus_position<TAB>tokens`
pub fn read_wsi_dataset<R: BufRead>(r: R) -> Result<Vec<WsiInstance>, SenseError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(4, '\t').collect();
        if f.len() != 4 {
            return Err(SenseError::Format(format!("line {}: expected 4 tab-separated fields", n + 1)));
        }
        let position =
            f[2].parse().map_err(|_| SenseError::Format(format!("line {}: bad focus position {:?}", n + 1, f[2])))?;
        if !seen.insert(f[0].to_string()) {
            return Err(SenseError::Format(format!("line {}: duplicate instance id {}", n + 1, f[0])));
        }
        out.push(WsiInstance {
            id: f[0].to_string(),
            lemma: f[1].to_string(),
            position,
            tokens: f[3].split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(out)
}

pub fn write_wsi_dataset<W: Write>(mut w: W, instances: &[WsiInstance]) -> std::io::Result<()> {
    for i in instances {
        writeln!(w, "{}\t{}\t{}\t{}", i.id, i.lemma, i.position, i.tokens.join(" "))?;
    }
    Ok(())
}
