//! Synthetic language family with a lexical alignment knob.
//!
//! The token space has three regions: two reserved ids (CLS, PAD), a "seen"
//! region holding one canonical surface form per latent concept token, and an
//! "unseen" region of language-private ids. A language's cipher maps each
//! latent token either to its canonical seen id (with probability alpha, the
//! alignment) or to a fresh private unseen id. Languages with alpha near 1
//! therefore share almost their whole surface vocabulary with the
//! pretraining corpus; languages with alpha near 0 are written in symbols
//! the frozen backbone has never embedded.

use serde::{Deserialize, Serialize};

use crate::backbone::PAD_TOKEN;
use crate::data::{Dataset, Example, LanguageId, Split};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const RESERVED_TOKENS: usize = PAD_TOKEN + 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentProfile {
    pub seen_min: f64,
    pub seen_max: f64,
    pub unseen_min: f64,
    pub unseen_max: f64,
}

impl Default for AlignmentProfile {
    fn default() -> Self {
        Self { seen_min: 0.9, seen_max: 1.0, unseen_min: 0.0, unseen_max: 0.7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticFamilyConfig {
    pub seed: u64,
    pub n_seen: usize,
    pub n_unseen: usize,
    /// Latent concept vocabulary size; also the size of the seen region.
    pub latent_vocab: usize,
    /// Size of the unseen region private ids are drawn from.
    pub unseen_region: usize,
    pub profile: AlignmentProfile,
}

impl Default for SyntheticFamilyConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_seen: 5,
            n_unseen: 5,
            latent_vocab: 400,
            unseen_region: 4000,
            profile: AlignmentProfile::default(),
        }
    }
}

impl SyntheticFamilyConfig {
    /// Backbone vocabulary needed to host this family.
    pub fn vocab_size(&self) -> usize {
        RESERVED_TOKENS + self.latent_vocab + self.unseen_region
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    pub id: LanguageId,
    /// latent token -> surface token id; injective by construction.
    pub cipher: Vec<usize>,
    pub alignment: f64,
    pub seen: bool,
    pub family: usize,
}

impl SyntheticLanguage {
    /// Invert the cipher; every surface id must map back to its latent token.
    pub fn decode(&self, surface: usize) -> Option<usize> {
        self.cipher.iter().position(|&s| s == surface)
    }
}

/// Deterministic language family: seen languages with alignments stratified
/// across the seen band, unseen languages across the unseen band (the low
/// end of that band yields the low-performing analogues).
pub fn generate_language_family(config: &SyntheticFamilyConfig) -> Result<Vec<SyntheticLanguage>> {
    if config.n_seen + config.n_unseen < 2 {
        return Err(Error::Config("a family needs at least two languages".into()));
    }
    if config.latent_vocab == 0 {
        return Err(Error::Config("latent vocabulary must be positive".into()));
    }
    let mut rng = SeededRng::new(config.seed).derive("language-family");

    // Global pool of private unseen-region ids, shuffled once; languages pop
    // from it so their private vocabularies never collide.
    let unseen_start = RESERVED_TOKENS + config.latent_vocab;
    let mut pool: Vec<usize> = (unseen_start..unseen_start + config.unseen_region).collect();
    rng.shuffle(&mut pool);
    let mut next_private = 0usize;

    let stratified = |lo: f64, hi: f64, i: usize, n: usize, rng: &mut SeededRng| -> f64 {
        lo + (hi - lo) * ((i as f64 + rng.uniform_f64()) / n as f64)
    };

    let mut languages = Vec::with_capacity(config.n_seen + config.n_unseen);
    for i in 0..config.n_seen + config.n_unseen {
        let seen = i < config.n_seen;
        let alignment = if seen {
            // High alignments first, so compact source sets take the most
            // aligned languages.
            let j = config.n_seen - 1 - i;
            stratified(config.profile.seen_min, config.profile.seen_max, j, config.n_seen, &mut rng)
        } else {
            let j = i - config.n_seen;
            stratified(
                config.profile.unseen_min,
                config.profile.unseen_max,
                j,
                config.n_unseen,
                &mut rng,
            )
        };
        let mut cipher = Vec::with_capacity(config.latent_vocab);
        for t in 0..config.latent_vocab {
            if rng.uniform_f64() < alignment {
                cipher.push(RESERVED_TOKENS + t);
            } else {
                if next_private >= pool.len() {
                    return Err(Error::Config(format!(
                        "unseen region of {} ids is too small for {} languages over a latent \
                         vocabulary of {}",
                        config.unseen_region,
                        config.n_seen + config.n_unseen,
                        config.latent_vocab
                    )));
                }
                cipher.push(pool[next_private]);
                next_private += 1;
            }
        }
        let id = if seen {
            LanguageId(format!("seen-{i:02}"))
        } else {
            LanguageId(format!("unseen-{:02}", i - config.n_seen))
        };
        languages.push(SyntheticLanguage { id, cipher, alignment, seen, family: i / 3 });
    }
    Ok(languages)
}

/// Topic task over the latent vocabulary: each class owns a disjoint keyword
/// block; the rest is shared background. Tokens come from the class block
/// with probability `keyword_prob`, so the total-variation distance between
/// any two class distributions is exactly `keyword_prob`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicTask {
    pub n_classes: usize,
    pub keywords_per_class: usize,
    pub keyword_prob: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub tv_floor: f64,
}

impl Default for TopicTask {
    fn default() -> Self {
        Self {
            n_classes: 7,
            keywords_per_class: 30,
            keyword_prob: 0.5,
            len_min: 8,
            len_max: 16,
            tv_floor: 0.3,
        }
    }
}

impl TopicTask {
    pub fn validate(&self, latent_vocab: usize) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("a topic task needs at least two classes".into()));
        }
        if self.keyword_prob < self.tv_floor {
            return Err(Error::Config(format!(
                "class distributions would be {} apart in total variation, below the {} floor",
                self.keyword_prob, self.tv_floor
            )));
        }
        if self.n_classes * self.keywords_per_class >= latent_vocab {
            return Err(Error::Config(format!(
                "latent vocabulary {latent_vocab} cannot hold {} classes of {} keywords plus \
                 background",
                self.n_classes, self.keywords_per_class
            )));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::Config("text length range is empty".into()));
        }
        Ok(())
    }

    fn background_start(&self) -> usize {
        self.n_classes * self.keywords_per_class
    }
}

/// Class-balanced dataset for one language. The latent draw consumes the rng
/// identically for every language; the cipher is applied afterwards, so two
/// languages generated from the same seed differ only by their ciphers.
pub fn generate_dataset(
    language: &SyntheticLanguage,
    task: &TopicTask,
    n_per_class: usize,
    rng: &SeededRng,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    task.validate(language.cipher.len())?;
    let mut rng = rng.derive("dataset");
    let background = task.background_start()..language.cipher.len();
    let mut examples = Vec::with_capacity(task.n_classes * n_per_class);
    for class in 0..task.n_classes {
        for i in 0..n_per_class {
            let len = task.len_min + rng.below(task.len_max - task.len_min + 1);
            let mut tokens = Vec::with_capacity(len);
            for _ in 0..len {
                let latent = if rng.uniform_f64() < task.keyword_prob {
                    class * task.keywords_per_class + rng.below(task.keywords_per_class)
                } else {
                    background.start + rng.below(background.end - background.start)
                };
                tokens.push(language.cipher[latent]);
            }
            let split = match i % 10 {
                8 => Split::Dev,
                9 => Split::Test,
                _ => Split::Train,
            };
            examples.push(Example { tokens, label: class, split });
        }
    }
    let vocab_bound = examples.iter().flat_map(|e| e.tokens.iter()).max().map_or(0, |m| m + 1);
    Dataset::new(language.id.clone(), language.seen, task.n_classes, examples, vocab_bound)
}

/// Add-one-smoothed frequency (naive Bayes) classifier: train token-class
/// counts, score by summed log-likelihood. Independent of the model path;
/// used to certify that generated tasks are learnable at all.
pub fn frequency_classifier_accuracy(
    train: &[&Example],
    test: &[&Example],
    n_classes: usize,
) -> f64 {
    use std::collections::HashMap;
    let mut counts: Vec<HashMap<usize, u64>> = vec![HashMap::new(); n_classes];
    let mut totals = vec![0u64; n_classes];
    let mut vocab: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    for ex in train {
        for &t in &ex.tokens {
            *counts[ex.label].entry(t).or_insert(0) += 1;
            totals[ex.label] += 1;
            vocab.insert(t);
        }
    }
    let v = vocab.len().max(1) as f64;
    let mut correct = 0usize;
    for ex in test {
        let mut best = (0usize, f64::NEG_INFINITY);
        for class in 0..n_classes {
            let mut score = 0.0f64;
            for &t in &ex.tokens {
                let c = counts[class].get(&t).copied().unwrap_or(0) as f64;
                score += ((c + 1.0) / (totals[class] as f64 + v)).ln();
            }
            if score > best.1 {
                best = (class, score);
            }
        }
        if best.0 == ex.label {
            correct += 1;
        }
    }
    if test.is_empty() {
        return 0.0;
    }
    correct as f64 / test.len() as f64
}
