//! Seeded corpora with a planted cause rule.
//!
//! Every dialogue has one non-neutral target whose text carries a trigger
//! token from that emotion's lexicon. A history utterance is a cause exactly
//! when it contains the same trigger; other history utterances may carry
//! triggers from other emotions as distractors.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Dialogue, EmotionVocab, Split, Utterance};
use crate::error::{Error, Result};

/// Trigger tokens for each non-neutral emotion of the default vocabulary.
pub const TRIGGER_LEXICON: [(&str, [&str; 6]); 6] = [
    ("anger", ["insult", "scam", "delay", "rude", "cheated", "overcharged"]),
    ("disgust", ["garbage", "mold", "stench", "cockroach", "vomit", "sewage"]),
    ("fear", ["burglar", "storm", "surgery", "earthquake", "ghost", "lawsuit"]),
    ("happiness", ["gift", "promotion", "vacation", "wedding", "bonus", "scarf"]),
    ("sadness", ["funeral", "divorce", "layoff", "breakup", "illness", "farewell"]),
    ("surprise", ["lottery", "twins", "proposal", "jackpot", "comet", "reunion"]),
];

const FILLER: [&str; 48] = [
    "i", "you", "we", "they", "the", "a", "this", "that", "it", "is", "was", "will", "be", "have",
    "had", "do", "did", "not", "really", "just", "about", "with", "for", "from", "today",
    "yesterday", "tomorrow", "maybe", "think", "know", "said", "told", "went", "came", "saw",
    "heard", "store", "office", "home", "friend", "mother", "boss", "train", "coffee", "news",
    "phone", "letter", "dinner",
];

/// Emotion whose lexicon contains `token`, if any.
pub fn trigger_emotion(token: &str) -> Option<&'static str> {
    TRIGGER_LEXICON
        .iter()
        .find(|(_, words)| words.contains(&token))
        .map(|(e, _)| *e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of distinct filler words (at most 48).
    pub vocab: usize,
    /// Trigger tokens used per emotion (at most 6), taken from the front of
    /// each lexicon entry.
    pub triggers_per_emotion: usize,
    /// Probability that a history utterance repeats the target's trigger.
    pub cause_rate: f64,
    /// Probability that a non-cause carries a trigger of another emotion.
    pub distractor_rate: f64,
    /// Probability that a history cause shares the target's emotion.
    pub cause_emotion_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_valid: 16,
            n_test: 16,
            min_len: 4,
            max_len: 10,
            vocab: FILLER.len(),
            triggers_per_emotion: 6,
            cause_rate: 0.2,
            distractor_rate: 0.15,
            cause_emotion_rate: 0.8,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn n_dialogues(&self) -> usize {
        self.n_train + self.n_valid + self.n_test
    }

    fn validate(&self) -> Result<()> {
        if self.min_len < 2 {
            return Err(Error::Config("synthetic dialogues need at least 2 utterances".into()));
        }
        if self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "empty length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.vocab == 0 || self.vocab > FILLER.len() {
            return Err(Error::Config(format!("vocab must be in 1..={}", FILLER.len())));
        }
        if self.triggers_per_emotion == 0 || self.triggers_per_emotion > TRIGGER_LEXICON[0].1.len() {
            return Err(Error::Config(format!(
                "triggers_per_emotion must be in 1..={}",
                TRIGGER_LEXICON[0].1.len()
            )));
        }
        let rates = [
            ("cause_rate", self.cause_rate),
            ("distractor_rate", self.distractor_rate),
            ("cause_emotion_rate", self.cause_emotion_rate),
        ];
        for (name, p) in rates {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be a probability")));
            }
        }
        Ok(())
    }
}

/// Deterministic corpus for a given config; dialogues are ordered train,
/// valid, test.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let emotions = EmotionVocab::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let filler = &FILLER[..cfg.vocab];
    let non_neutral: Vec<usize> = (0..emotions.len()).filter(|&e| e != emotions.neutral()).collect();

    let splits = std::iter::repeat_n(Split::Train, cfg.n_train)
        .chain(std::iter::repeat_n(Split::Valid, cfg.n_valid))
        .chain(std::iter::repeat_n(Split::Test, cfg.n_test));

    let mut dialogues = Vec::with_capacity(cfg.n_dialogues());
    for (k, split) in splits.enumerate() {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let target = rng.gen_range((len / 2).max(1)..len);
        let speakers = if rng.gen_bool(0.5) { ["A", "B"] } else { ["B", "A"] };

        let (lex_idx, (emotion_name, words)) = TRIGGER_LEXICON
            .iter()
            .enumerate()
            .collect::<Vec<_>>()
            .choose(&mut rng)
            .copied()
            .expect("lexicon is non-empty");
        let target_emotion = emotions.id(emotion_name).expect("lexicon emotions are in the default vocabulary");
        let n_trig = cfg.triggers_per_emotion;
        let trigger = *words[..n_trig].choose(&mut rng).expect("non-empty");

        let mut utterances = Vec::with_capacity(len);
        let mut causal_pairs = BTreeSet::new();
        for i in 0..len {
            let n_words = rng.gen_range(3..=6);
            let mut text: Vec<&str> = (0..n_words)
                .map(|_| *filler.choose(&mut rng).expect("non-empty"))
                .collect();
            let mut emotion = if rng.gen_bool(0.6) {
                emotions.neutral()
            } else {
                *non_neutral.choose(&mut rng).expect("non-empty")
            };
            let inserted = if i == target {
                emotion = target_emotion;
                causal_pairs.insert((target, i));
                Some(trigger)
            } else if i < target && rng.gen_bool(cfg.cause_rate) {
                causal_pairs.insert((target, i));
                if rng.gen_bool(cfg.cause_emotion_rate) {
                    emotion = target_emotion;
                }
                Some(trigger)
            } else if rng.gen_bool(cfg.distractor_rate) {
                let other = loop {
                    let j = rng.gen_range(0..TRIGGER_LEXICON.len());
                    if j != lex_idx {
                        break j;
                    }
                };
                Some(*TRIGGER_LEXICON[other].1[..n_trig].choose(&mut rng).expect("non-empty"))
            } else {
                None
            };
            if let Some(word) = inserted {
                let at = rng.gen_range(0..=text.len());
                text.insert(at, word);
            }
            let mut sentence = text.join(" ");
            sentence.push(*['.', '!', '?'].choose(&mut rng).expect("non-empty"));
            utterances.push(Utterance {
                index: i,
                speaker: speakers[i % 2].to_string(),
                text: sentence,
                emotion,
            });
        }
        dialogues.push(Dialogue {
            id: format!("synth-{k:04}"),
            split,
            utterances,
            causal_pairs,
        });
    }
    Ok(Corpus {
        emotions,
        dialogues,
        duplicates_removed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_samples, serialize_corpus};

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = SynthConfig::default();
        let a = serialize_corpus(&generate_synthetic(&cfg).unwrap());
        let b = serialize_corpus(&generate_synthetic(&cfg).unwrap());
        assert_eq!(a, b);
        let other = SynthConfig { seed: 8, ..cfg };
        assert_ne!(a, serialize_corpus(&generate_synthetic(&other).unwrap()));
    }

    #[test]
    fn rejects_infeasible_lengths() {
        let cfg = SynthConfig { min_len: 1, ..SynthConfig::default() };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig { min_len: 5, max_len: 4, ..SynthConfig::default() };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn every_sample_has_a_positive() {
        let cfg = SynthConfig {
            n_train: 64,
            n_valid: 0,
            n_test: 0,
            min_len: 4,
            max_len: 10,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic(&cfg).unwrap();
        let set = build_samples(&corpus);
        assert_eq!(set.samples.len(), 64);
        assert!(set.samples.iter().all(|s| s.positives() >= 1));
        let rate = set.positive_pairs as f64 / (set.positive_pairs + set.negative_pairs) as f64;
        assert!((0.15..=0.45).contains(&rate), "positive rate {rate}");
    }

    #[test]
    fn trigger_lookup() {
        assert_eq!(trigger_emotion("gift"), Some("happiness"));
        assert_eq!(trigger_emotion("coffee"), None);
    }
}
