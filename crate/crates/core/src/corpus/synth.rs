//! A two-topic sentence generator used to build pseudoword experiments.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::pseudo::PseudowordSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Topic {
    Food,
    Music,
}

impl Topic {
    pub fn other(self) -> Topic {
        match self {
            Topic::Food => Topic::Music,
            Topic::Music => Topic::Food,
        }
    }
}

struct Lexicon {
    sources: &'static [&'static str],
    nouns: &'static [&'static str],
    verbs: &'static [&'static str],
    adjectives: &'static [&'static str],
    places: &'static [&'static str],
}

const FOOD: Lexicon = Lexicon {
    sources: &["apple", "banana", "cherry"],
    nouns: &["bread", "cheese", "soup", "pie", "juice", "salad", "honey", "cake", "farmer", "chef", "basket", "tree"],
    verbs: &["eat", "bake", "slice", "peel", "taste", "pick", "cook", "wash", "chop", "serve"],
    adjectives: &["ripe", "sweet", "sour", "fresh", "juicy", "crunchy", "rotten", "tasty"],
    places: &["kitchen", "orchard", "market", "garden", "bakery"],
};

const MUSIC: Lexicon = Lexicon {
    sources: &["piano", "guitar", "violin"],
    nouns: &[
        "song",
        "melody",
        "concert",
        "band",
        "singer",
        "drum",
        "chord",
        "rhythm",
        "album",
        "choir",
        "orchestra",
        "note",
    ],
    verbs: &["play", "tune", "strum", "hear", "record", "practice", "perform", "compose", "rehearse", "amplify"],
    adjectives: &["loud", "quiet", "melodic", "acoustic", "electric", "classical", "tuned", "rhythmic"],
    places: &["studio", "stage", "theater", "conservatory", "club"],
};

const TEMPLATES: &[&str] = &[
    "the A N V the S .",
    "we V the A S in the P .",
    "S and N are A .",
    "my friend will V a A S every day .",
    "they V the S with the N .",
    "a A S sat in the P .",
    "the N said that the S was A .",
    "in the P we V S and N .",
];

fn lexicon(t: Topic) -> &'static Lexicon {
    match t {
        Topic::Food => &FOOD,
        Topic::Music => &MUSIC,
    }
}

/// Words that mark a topic: everything except shared function words.
pub fn topic_words(t: Topic) -> Vec<&'static str> {
    let l = lexicon(t);
    [l.sources, l.nouns, l.verbs, l.adjectives, l.places].concat()
}

/// Pairs each food source with a music source.
pub fn topic_pseudoword_specs() -> Vec<PseudowordSpec> {
    FOOD.sources.iter().zip(MUSIC.sources).map(|(a, b)| PseudowordSpec::new(a, b)).collect()
}

#[derive(Clone, Debug)]
pub struct TopicCorpusConfig {
    pub sentences: usize,
    /// Probability that a content slot (other than the source slot) draws
    /// from the other topic.
    pub noise: f64,
    /// Probability that a source slot holds one of the topic's source words
    /// rather than an ordinary noun.
    pub source_rate: f64,
}

impl Default for TopicCorpusConfig {
    fn default() -> Self {
        TopicCorpusConfig { sentences: 20_000, noise: 0.1, source_rate: 0.6 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TopicCorpus {
    pub docs: Vec<Vec<String>>,
    pub topics: Vec<Topic>,
}

/// One sentence per document, each drawn from a uniformly chosen topic.
pub fn topic_corpus<R: Rng + ?Sized>(cfg: &TopicCorpusConfig, rng: &mut R) -> TopicCorpus {
    let mut out = TopicCorpus::default();
    for _ in 0..cfg.sentences {
        let topic = if rng.random::<bool>() { Topic::Food } else { Topic::Music };
        let template = TEMPLATES.choose(rng).unwrap();
        let mut toks = Vec::new();
        for slot in template.split(' ') {
            let pick = |rng: &mut R, f: fn(&Lexicon) -> &'static [&'static str]| {
                let t = if rng.random::<f64>() < cfg.noise { topic.other() } else { topic };
                f(lexicon(t)).choose(rng).unwrap().to_string()
            };
            let tok = match slot {
                "S" => {
                    let l = lexicon(topic);
                    let pool = if rng.random::<f64>() < cfg.source_rate { l.sources } else { l.nouns };
                    pool.choose(rng).unwrap().to_string()
                }
                "N" => pick(rng, |l| l.nouns),
                "V" => pick(rng, |l| l.verbs),
                "A" => pick(rng, |l| l.adjectives),
                "P" => pick(rng, |l| l.places),
                w => w.to_string(),
            };
            toks.push(tok);
        }
        out.docs.push(toks);
        out.topics.push(topic);
    }
    out
}
