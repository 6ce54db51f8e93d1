//! Corpus, sample construction, vocabulary and knowledge on synthetic data.

use proptest::prelude::*;

use kbcin::dataset::synthetic::{generate_synthetic, trigger_emotion, SynthConfig};
use kbcin::dataset::{build_samples, parse_corpus, relative_position, serialize_corpus, EmotionVocab, Split};
use kbcin::encoder::{split_tokens, tokenize, Vocabulary};
use kbcin::knowledge::{load_store, synthesize_store, RelationKind};
use kbcin::prediction::{f1_metrics, PairPrediction};

fn small(seed: u64, n: usize) -> SynthConfig {
    SynthConfig {
        n_train: n,
        n_valid: n / 2,
        n_test: n / 2,
        seed,
        ..SynthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corpus_round_trips(seed in any::<u64>(), n in 1..12usize) {
        let corpus = generate_synthetic(&small(seed, n)).unwrap();
        let text = serialize_corpus(&corpus);
        let parsed = parse_corpus(&text, &EmotionVocab::default()).unwrap();
        prop_assert_eq!(&parsed, &corpus);
        prop_assert_eq!(serialize_corpus(&parsed), text);
    }

    #[test]
    fn samples_are_well_formed(seed in any::<u64>(), n in 1..12usize) {
        let corpus = generate_synthetic(&small(seed, n)).unwrap();
        let set = build_samples(&corpus);
        let neutral = corpus.emotions.neutral();
        let mut pos = 0;
        let mut neg = 0;
        for s in &set.samples {
            let d = corpus.dialogue(&s.dialogue_id).unwrap();
            prop_assert_ne!(s.target_emotion, neutral);
            prop_assert_eq!(s.labels.len(), s.target + 1);
            prop_assert_eq!(s.emotions.len(), s.target + 1);
            prop_assert_eq!(s.distances.clone(), (0..=s.target).map(|i| s.target - i).collect::<Vec<_>>());
            for i in s.candidates() {
                let annotated = d.causal_pairs.contains(&(s.target, i));
                prop_assert_eq!(s.labels[i] == 1, annotated);
            }
            pos += s.positives();
            neg += s.labels.len() - s.positives();
        }
        prop_assert_eq!((pos, neg), (set.positive_pairs, set.negative_pairs));
    }

    #[test]
    fn relative_position_is_clipped(i in 0..200usize, gap in 0..200usize, p_max in 1..60usize) {
        let t = i + gap;
        let p = relative_position(i, t, p_max).unwrap();
        prop_assert_eq!(p, gap.min(p_max - 1));
        prop_assert!(relative_position(t + 1, t, p_max).is_err());
    }

    #[test]
    fn knowledge_round_trips(seed in any::<u64>(), dim in 1..9usize) {
        let corpus = generate_synthetic(&small(seed, 3)).unwrap();
        let store = synthesize_store(&corpus, dim, seed).unwrap();
        let loaded = load_store(&store.to_jsonl(), &corpus).unwrap();
        prop_assert_eq!(&loaded, &store);
        for d in &corpus.dialogues {
            for u in &d.utterances {
                for rel in RelationKind::ALL {
                    let v = store.get(&d.id, u.index, rel).unwrap();
                    prop_assert_eq!(v.len(), dim);
                    prop_assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

/// The token planted in a target, found again through the lexicon.
fn target_trigger(text: &str, emotion: &str) -> String {
    split_tokens(text)
        .into_iter()
        .find(|t| trigger_emotion(t) == Some(emotion))
        .expect("targets carry a trigger")
}

#[test]
fn planted_rule_is_a_perfect_classifier() {
    let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
    let set = build_samples(&corpus);
    let mut predictions = Vec::new();
    for s in &set.samples {
        let d = corpus.dialogue(&s.dialogue_id).unwrap();
        let emotion = corpus.emotions.label(s.target_emotion);
        let trigger = target_trigger(&d.utterances[s.target].text, emotion);
        for i in s.candidates() {
            let hit = split_tokens(&d.utterances[i].text).contains(&trigger);
            predictions.push(PairPrediction::new(&s.dialogue_id, s.target, i, if hit { 1.0 } else { 0.0 }, s.labels[i]));
        }
    }
    let m = f1_metrics(&predictions, 0.5).unwrap();
    assert_eq!((m.pos_f1, m.neg_f1, m.macro_f1), (100.0, 100.0, 100.0));
    assert_eq!(set.samples.len(), corpus.dialogues.len());
}

#[test]
fn default_corpus_shape() {
    let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
    let count = |s| corpus.split(s).count();
    assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (64, 16, 16));
    let set = build_samples(&corpus);
    let rate = set.positive_pairs as f64 / (set.positive_pairs + set.negative_pairs) as f64;
    assert!((0.15..=0.45).contains(&rate), "positive rate {rate}");
}

#[test]
fn train_vocabulary_covers_train_text() {
    let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
    let texts: Vec<&str> = corpus
        .split(Split::Train)
        .flat_map(|d| d.utterances.iter().map(|u| u.text.as_str()))
        .collect();
    let vocab = Vocabulary::build(texts.iter().copied());
    let unk = texts.iter().flat_map(|t| tokenize(t, &vocab)).filter(|&id| id == vocab.unk()).count();
    assert_eq!(unk, 0);
    assert!(vocab.is_valid());
}
