//! Small deterministic models and batches for tests, self-checks and benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    build_vocabulary, pack_sequences, topic_corpus, MaskAction, MaskedBatch, Target, TokenId, TopicCorpusConfig,
    VocabConfig,
};
use crate::model::{ModelConfig, PolyLm};

pub const TINY_CORPUS: &[&str] = &[
    "i like apple pie .",
    "the band played a song on the stage .",
    "she ate an apple and a banana .",
    "the band played the piano .",
    "i like the song .",
];

/// A narrow two-by-one layer configuration.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        filter_size: 32,
        n_heads: 2,
        layers_disamb: 1,
        layers_predict: 1,
        seq_len: 16,
        dropout: 0.1,
        ..ModelConfig::desk()
    }
}

/// Model over [`TINY_CORPUS`]; every word seen more than once gets `k` senses.
pub fn tiny_model(k: u32, seed: u64) -> PolyLm {
    let cfg = VocabConfig { min_count: 0, multi_sense_min_count: 1, senses_per_word: k, focus: vec![] };
    let (vocab, inv) = build_vocabulary(TINY_CORPUS, &cfg).expect("fixture corpus is valid");
    PolyLm::new(tiny_config(), vocab, inv, &mut ChaCha8Rng::seed_from_u64(seed)).expect("fixture config is valid")
}

fn row(model: &PolyLm, text: &str, width: usize) -> Vec<TokenId> {
    let mut r = model.vocab.encode(text);
    r.resize(width, model.vocab.pad());
    r
}

/// Two padded sequences with four targets covering all mask actions.
/// Every target word is multi-sense when `k > 1`.
pub fn tiny_batch(model: &PolyLm) -> MaskedBatch {
    let rows = vec![row(model, "i like apple pie .", 9), row(model, "the band played the piano and a song .", 9)];
    let t = |row, pos, action| Target { row, pos, action };
    let targets = vec![
        t(0, 2, MaskAction::Masked),
        t(0, 1, MaskAction::Kept),
        t(1, 1, MaskAction::Masked),
        t(1, 8, MaskAction::Randomized),
    ];
    let replacement = model.vocab.id("song").expect("fixture word");
    MaskedBatch::with_targets(rows, targets, &model.vocab, &[replacement]).expect("fixture batch is valid")
}

/// A `sentences`-document topic corpus with a vocabulary over every word
/// (frequent words get `k` senses) and its padded training windows.
pub fn toy_training_setup(sentences: usize, k: u32, seed: u64) -> (PolyLm, Vec<Vec<TokenId>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = topic_corpus(&TopicCorpusConfig { sentences, ..TopicCorpusConfig::default() }, &mut rng);
    let lines: Vec<String> = corpus.docs.iter().map(|d| d.join(" ")).collect();
    let cfg = VocabConfig { min_count: 0, multi_sense_min_count: 3, senses_per_word: k, focus: vec![] };
    let (vocab, inv) = build_vocabulary(&lines, &cfg).expect("toy corpus is valid");
    let model = PolyLm::new(tiny_config(), vocab, inv, &mut rng).expect("fixture config is valid");
    let docs: Vec<Vec<TokenId>> = corpus.docs.iter().map(|d| model.vocab.encode_tokens(d)).collect();
    let windows = pack_sequences(&docs, model.config.seq_len, model.vocab.pad());
    (model, windows)
}
