//! Synthetic keyword-planted corpora so the whole pipeline runs without
//! any downloads. Real corpora plug into the same csv/tsv/jsonl formats.
//!
//! Each sentence is a run of neutral filler words; with probability
//! `informative_prob` one to three keywords of the sentence's class are
//! planted at random positions, and a small fraction of sentences carry a
//! single off-class keyword as noise. Uninformative sentences bound the
//! reachable accuracy away from 100%, which keeps the small-sample /
//! large-sample comparison meaningful.

use super::{Provenance, Record, TextDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixtureKind {
    /// Two-class sentiment-style reviews.
    Sentiment2,
    /// Six-class topic snippets.
    Topics6,
}

impl std::fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FixtureKind::Sentiment2 => write!(f, "sentiment2"),
            FixtureKind::Topics6 => write!(f, "topics6"),
        }
    }
}

impl std::str::FromStr for FixtureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sentiment2" => Ok(FixtureKind::Sentiment2),
            "topics6" => Ok(FixtureKind::Topics6),
            other => Err(format!(
                "unknown fixture {other:?} (expected sentiment2 or topics6)"
            )),
        }
    }
}

const FILLERS: &[&str] = &[
    "the", "a", "this", "that", "movie", "film", "plot", "scene", "story", "it", "was", "with",
    "and", "of", "in", "on", "for", "director", "camera", "script", "dialogue", "character",
    "ending", "beginning", "music", "set", "costume", "pace", "tone", "cast", "audience",
    "screen", "review", "critic", "viewer", "time", "night", "week", "house", "city", "person",
    "friend", "family", "work", "day", "moment", "part", "way", "thing", "world", "life", "year",
    "start", "middle", "act", "line", "word", "voice", "style", "look", "idea",
];

const POSITIVE: &[&str] = &[
    "great", "wonderful", "excellent", "delightful", "superb", "charming", "brilliant", "lovely",
    "enjoyable", "masterful", "refreshing", "captivating",
];

const NEGATIVE: &[&str] = &[
    "terrible", "awful", "dreadful", "boring", "clumsy", "bland", "tedious", "disappointing",
    "shallow", "grating", "lifeless", "botched",
];

const TOPICS: [(&str, &[&str]); 6] = [
    (
        "sports",
        &["goal", "match", "coach", "league", "tournament", "striker", "defender", "referee", "stadium", "season"],
    ),
    (
        "finance",
        &["market", "stocks", "shares", "revenue", "profit", "investor", "earnings", "dividend", "budget", "inflation"],
    ),
    (
        "science",
        &["experiment", "theory", "lab", "particle", "genome", "telescope", "hypothesis", "molecule", "dataset", "researcher"],
    ),
    (
        "food",
        &["recipe", "flavor", "kitchen", "spice", "roasted", "delicious", "chef", "sauce", "baked", "menu"],
    ),
    (
        "travel",
        &["journey", "passport", "flight", "hotel", "beach", "luggage", "tour", "destination", "island", "airport"],
    ),
    (
        "music",
        &["melody", "concert", "guitar", "rhythm", "album", "chorus", "band", "lyrics", "drummer", "tempo"],
    ),
];

/// Noise knobs for fixture generation.
#[derive(Clone, Copy, Debug)]
pub struct FixtureNoise {
    /// Fraction of sentences that carry class keywords at all.
    pub informative_prob: f64,
    /// Fraction of informative sentences that also carry one off-class
    /// keyword.
    pub cross_noise_prob: f64,
}

impl Default for FixtureNoise {
    fn default() -> Self {
        FixtureNoise {
            informative_prob: 0.9,
            cross_noise_prob: 0.1,
        }
    }
}

impl FixtureNoise {
    /// Every sentence is informative and clean: a bag-of-words linear
    /// classifier separates the classes exactly.
    pub fn separable() -> Self {
        FixtureNoise {
            informative_prob: 1.0,
            cross_noise_prob: 0.0,
        }
    }
}

/// Generate a fixture corpus with the default noise profile.
/// Deterministic for a fixed `(kind, n, seed)`; the seed is recorded in
/// the dataset provenance.
pub fn generate(kind: FixtureKind, n: usize, seed: u64) -> TextDataset {
    generate_with(kind, n, seed, FixtureNoise::default())
}

/// Generate a fixture corpus with explicit noise knobs.
pub fn generate_with(kind: FixtureKind, n: usize, seed: u64, noise: FixtureNoise) -> TextDataset {
    let (class_names, keywords): (Vec<String>, Vec<&[&str]>) = match kind {
        FixtureKind::Sentiment2 => (
            vec!["negative".to_string(), "positive".to_string()],
            vec![NEGATIVE, POSITIVE],
        ),
        FixtureKind::Topics6 => TOPICS
            .iter()
            .map(|(name, words)| (name.to_string(), *words))
            .unzip(),
    };
    let classes = class_names.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        // Round-robin labels keep every prefix of the corpus balanced.
        let label = i % classes;
        let len = rng.random_range(8..=14usize);
        let mut tokens: Vec<&str> = (0..len)
            .map(|_| FILLERS[rng.random_range(0..FILLERS.len())])
            .collect();
        if rng.random::<f64>() < noise.informative_prob {
            let planted = rng.random_range(1..=3usize);
            for _ in 0..planted {
                let word = keywords[label][rng.random_range(0..keywords[label].len())];
                let pos = rng.random_range(0..=tokens.len());
                tokens.insert(pos, word);
            }
            if rng.random::<f64>() < noise.cross_noise_prob {
                let other = (label + 1 + rng.random_range(0..classes - 1)) % classes;
                let word = keywords[other][rng.random_range(0..keywords[other].len())];
                let pos = rng.random_range(0..=tokens.len());
                tokens.insert(pos, word);
            }
        }
        records.push(Record {
            text: tokens.join(" "),
            text2: None,
            label,
        });
    }
    let default = FixtureNoise::default();
    let source = if noise.informative_prob == default.informative_prob
        && noise.cross_noise_prob == default.cross_noise_prob
    {
        format!("fixture:{kind}(n={n}, seed={seed})")
    } else {
        format!(
            "fixture:{kind}(n={n}, seed={seed}, informative={}, cross={})",
            noise.informative_prob, noise.cross_noise_prob
        )
    };
    TextDataset::new(
        records,
        class_names,
        Provenance {
            source,
            sampling: None,
        },
    )
    .expect("fixture generation always yields a valid dataset")
}
