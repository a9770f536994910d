use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use super::CorpusError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskAction {
    Masked,
    Randomized,
    Kept,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub target_rate: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { target_rate: 0.15, mask_frac: 0.8, random_frac: 0.1, keep_frac: 0.1 }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fracs = [self.mask_frac, self.random_frac, self.keep_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CorpusError::Config(format!(
                "mask/random/keep fractions must be probabilities summing to 1, got {fracs:?}"
            )));
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(CorpusError::Config(format!("target_rate must lie in (0, 1], got {}", self.target_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub row: usize,
    pub pos: usize,
    pub action: MaskAction,
}

/// Paired original/masked rows of equal length, padded at the tail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub original: Vec<Vec<TokenId>>,
    pub masked: Vec<Vec<TokenId>>,
    /// Sorted by (row, pos).
    pub targets: Vec<Target>,
    /// Number of leading non-pad tokens per row.
    pub lengths: Vec<usize>,
}

impl MaskedBatch {
    /// Builds a batch whose targets are given explicitly. Masked targets
    /// become `[MASK]`; randomized targets must be expressed by the caller
    /// through `replacements`.
    pub fn with_targets(
        rows: Vec<Vec<TokenId>>,
        targets: Vec<Target>,
        vocab: &Vocabulary,
        replacements: &[TokenId],
    ) -> Result<Self, CorpusError> {
        let lengths = check_rows(&rows, vocab)?;
        let mut masked = rows.clone();
        let mut targets = targets;
        targets.sort_by_key(|t| (t.row, t.pos));
        let mut repl = replacements.iter();
        for t in &targets {
            if t.row >= rows.len() || t.pos >= lengths[t.row] {
                return Err(CorpusError::Config(format!("target ({}, {}) is not a real token", t.row, t.pos)));
            }
            match t.action {
                MaskAction::Masked => masked[t.row][t.pos] = vocab.mask(),
                MaskAction::Randomized => {
                    masked[t.row][t.pos] = *repl
                        .next()
                        .ok_or_else(|| CorpusError::Config("missing replacement for randomized target".into()))?
                }
                MaskAction::Kept => {}
            }
        }
        Ok(MaskedBatch { original: rows, masked, targets, lengths })
    }

    pub fn rows(&self) -> usize {
        self.original.len()
    }

    pub fn seq_len(&self) -> usize {
        self.original.first().map_or(0, Vec::len)
    }
}

fn check_rows(rows: &[Vec<TokenId>], vocab: &Vocabulary) -> Result<Vec<usize>, CorpusError> {
    if rows.is_empty() {
        return Err(CorpusError::Config("batch has no sequences".into()));
    }
    let width = rows[0].len();
    let pad = vocab.pad();
    let mut lengths = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(CorpusError::Config(format!("row {i} has length {} but row 0 has {width}", row.len())));
        }
        let len = row.iter().position(|&t| t == pad).unwrap_or(width);
        if len == 0 {
            return Err(CorpusError::Config(format!("row {i} is entirely padding")));
        }
        if row[len..].iter().any(|&t| t != pad) {
            return Err(CorpusError::Config(format!("row {i} has padding before real tokens")));
        }
        if let Some(&t) = row.iter().find(|&&t| t as usize >= vocab.len()) {
            return Err(CorpusError::Config(format!("row {i} holds id {t} outside the vocabulary")));
        }
        lengths.push(len);
    }
    Ok(lengths)
}

/// Draws targets and mask actions for a batch of padded sequences.
pub fn make_masked_batch<R: Rng + ?Sized>(
    sequences: &[Vec<TokenId>],
    vocab: &Vocabulary,
    rng: &mut R,
    cfg: &MaskingConfig,
) -> Result<MaskedBatch, CorpusError> {
    cfg.validate()?;
    let lengths = check_rows(sequences, vocab)?;
    let ordinary = vocab.ordinary_ids();
    if cfg.random_frac > 0.0 && ordinary.is_empty() {
        return Err(CorpusError::Config("random replacement needs at least one ordinary token".into()));
    }
    loop {
        let mut masked = sequences.to_vec();
        let mut targets = Vec::new();
        for (row, &len) in lengths.iter().enumerate() {
            for pos in 0..len {
                if rng.random::<f64>() >= cfg.target_rate {
                    continue;
                }
                let u = rng.random::<f64>();
                let action = if u < cfg.mask_frac {
                    MaskAction::Masked
                } else if u < cfg.mask_frac + cfg.random_frac {
                    MaskAction::Randomized
                } else {
                    MaskAction::Kept
                };
                match action {
                    MaskAction::Masked => masked[row][pos] = vocab.mask(),
                    MaskAction::Randomized => masked[row][pos] = rng.random_range(ordinary.clone()),
                    MaskAction::Kept => {}
                }
                targets.push(Target { row, pos, action });
            }
        }
        if !targets.is_empty() {
            return Ok(MaskedBatch { original: sequences.to_vec(), masked, targets, lengths });
        }
    }
}

/// Splits each document into consecutive windows of `seq_len` tokens.
/// Windows never span two documents; a document's final shorter window is
/// padded with `pad`.
pub fn pack_sequences(docs: &[Vec<TokenId>], seq_len: usize, pad: TokenId) -> Vec<Vec<TokenId>> {
    assert!(seq_len > 0, "seq_len must be positive");
    let mut out = Vec::new();
    for doc in docs {
        for chunk in doc.chunks(seq_len) {
            let mut w = chunk.to_vec();
            w.resize(seq_len, pad);
            out.push(w);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{build_vocabulary, VocabConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        let cfg = VocabConfig { min_count: 0, multi_sense_min_count: 100, senses_per_word: 1, focus: vec![] };
        build_vocabulary(["a b c d e f g h i j"], &cfg).unwrap().0
    }

    fn rows(v: &Vocabulary, n: usize, width: usize, len: usize) -> Vec<Vec<TokenId>> {
        let ids: Vec<TokenId> = v.ordinary_ids().collect();
        (0..n)
            .map(|r| {
                let mut row: Vec<TokenId> = (0..len).map(|i| ids[(r + i) % ids.len()]).collect();
                row.resize(width, v.pad());
                row
            })
            .collect()
    }

    #[test]
    fn empirical_rates_match_defaults() {
        let v = vocab();
        let seqs = rows(&v, 1000, 128, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MaskingConfig::default();
        let mut positions = 0usize;
        let mut counts = [0usize; 3];
        while positions < 1_000_000 {
            let b = make_masked_batch(&seqs, &v, &mut rng, &cfg).unwrap();
            positions += b.lengths.iter().sum::<usize>();
            for t in &b.targets {
                counts[t.action as usize] += 1;
            }
        }
        let n: usize = counts.iter().sum();
        let rate = n as f64 / positions as f64;
        assert!((rate - 0.15).abs() < 0.005, "target rate {rate}");
        for (c, p) in counts.iter().zip([0.8, 0.1, 0.1]) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let f = *c as f64 / n as f64;
            assert!((f - p).abs() < 3.0 * se, "fraction {f} vs {p}");
        }
    }

    #[test]
    fn full_masking_masks_every_real_token() {
        let v = vocab();
        let seqs = rows(&v, 4, 12, 7);
        let cfg = MaskingConfig { target_rate: 1.0, mask_frac: 1.0, random_frac: 0.0, keep_frac: 0.0 };
        let b = make_masked_batch(&seqs, &v, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        for row in &b.masked {
            assert!(row[..7].iter().all(|&t| t == v.mask()));
            assert!(row[7..].iter().all(|&t| t == v.pad()));
        }
        assert_eq!(b.targets.len(), 28);
    }

    #[test]
    fn seeded_batches_identical() {
        let v = vocab();
        let seqs = rows(&v, 8, 16, 10);
        let cfg = MaskingConfig::default();
        let a = make_masked_batch(&seqs, &v, &mut ChaCha8Rng::seed_from_u64(42), &cfg).unwrap();
        let b = make_masked_batch(&seqs, &v, &mut ChaCha8Rng::seed_from_u64(42), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_padding_rows_and_bad_fractions() {
        let v = vocab();
        let mut seqs = rows(&v, 2, 8, 4);
        seqs[1] = vec![v.pad(); 8];
        let err = make_masked_batch(&seqs, &v, &mut ChaCha8Rng::seed_from_u64(0), &MaskingConfig::default());
        assert!(err.is_err());
        let cfg = MaskingConfig { mask_frac: 0.5, ..Default::default() };
        let seqs = rows(&v, 2, 8, 4);
        assert!(make_masked_batch(&seqs, &v, &mut ChaCha8Rng::seed_from_u64(0), &cfg).is_err());
    }

    #[test]
    fn tiny_batches_redraw_until_a_target_exists() {
        let v = vocab();
        let seqs = rows(&v, 1, 4, 1);
        let cfg = MaskingConfig { target_rate: 0.01, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let b = make_masked_batch(&seqs, &v, &mut rng, &cfg).unwrap();
            assert_eq!(b.targets.len(), 1);
        }
    }

    #[test]
    fn explicit_targets() {
        let v = vocab();
        let seqs = rows(&v, 2, 6, 5);
        let t = vec![Target { row: 1, pos: 2, action: MaskAction::Masked }];
        let b = MaskedBatch::with_targets(seqs.clone(), t.clone(), &v, &[]).unwrap();
        assert_eq!(b.masked[1][2], v.mask());
        assert_eq!(b.masked[0], seqs[0]);
        let bad = vec![Target { row: 0, pos: 5, action: MaskAction::Masked }];
        assert!(MaskedBatch::with_targets(seqs, bad, &v, &[]).is_err());
    }

    #[test]
    fn packing_respects_documents() {
        let docs = vec![vec![1, 2, 3], vec![4, 5], vec![6, 7, 8, 9, 10, 11], vec![], vec![12]];
        let packed = pack_sequences(&docs, 5, 0);
        assert_eq!(
            packed,
            vec![
                vec![1, 2, 3, 0, 0],
                vec![4, 5, 0, 0, 0],
                vec![6, 7, 8, 9, 10],
                vec![11, 0, 0, 0, 0],
                vec![12, 0, 0, 0, 0]
            ]
        );
    }

    proptest! {
        #[test]
        fn non_targets_untouched(seed in any::<u64>(), len in 1usize..16, n in 1usize..6) {
            let v = vocab();
            let seqs = rows(&v, n, 16, len);
            let b = make_masked_batch(&seqs, &v, &mut ChaCha8Rng::seed_from_u64(seed), &MaskingConfig::default()).unwrap();
            let mut is_target = vec![vec![None; 16]; n];
            for t in &b.targets {
                prop_assert!(t.pos < b.lengths[t.row]);
                prop_assert_ne!(b.original[t.row][t.pos], v.pad());
                is_target[t.row][t.pos] = Some(t.action);
            }
            for r in 0..n {
                for p in 0..16 {
                    match is_target[r][p] {
                        None | Some(MaskAction::Kept) => prop_assert_eq!(b.masked[r][p], b.original[r][p]),
                        Some(MaskAction::Masked) => prop_assert_eq!(b.masked[r][p], v.mask()),
                        Some(MaskAction::Randomized) => prop_assert!(!v.is_special(b.masked[r][p])),
                    }
                }
            }
        }

        #[test]
        fn packing_conserves_tokens(docs in prop::collection::vec(prop::collection::vec(1u32..50, 0..20), 0..20), seq_len in 1usize..12) {
            let packed = pack_sequences(&docs, seq_len, 0);
            let flat: Vec<u32> = packed.iter().flatten().copied().filter(|&t| t != 0).collect();
            let orig: Vec<u32> = docs.iter().flatten().copied().collect();
            prop_assert_eq!(flat, orig);
            prop_assert!(packed.iter().all(|w| w.len() == seq_len));
        }
    }
}
