//! Conversation corpora and causal-emotion-entailment samples.
//!
//! Indices are 0-based everywhere, including the corpus file format.

pub mod synthetic;

pub use synthetic::{generate_synthetic, trigger_emotion, SynthConfig, TRIGGER_LEXICON};

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NEUTRAL: &str = "neutral";

/// The seven DailyDialog emotion classes.
pub const DEFAULT_EMOTIONS: [&str; 7] = [
    "neutral",
    "anger",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
];

/// Ordered emotion label set; ids are positions in the list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionVocab {
    labels: Vec<String>,
}

impl Default for EmotionVocab {
    fn default() -> Self {
        Self {
            labels: DEFAULT_EMOTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl EmotionVocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if !labels.iter().any(|l| l == NEUTRAL) {
            return Err(Error::Config(format!(
                "emotion vocabulary must contain `{NEUTRAL}`"
            )));
        }
        let unique: BTreeSet<_> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::Config("duplicate emotion label".into()));
        }
        Ok(Self { labels })
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn neutral(&self) -> usize {
        self.id(NEUTRAL).expect("validated at construction")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: String,
    pub emotion: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
    /// `(target, cause)` with `cause <= target`.
    pub causal_pairs: BTreeSet<(usize, usize)>,
}

impl Dialogue {
    /// Speaker of each utterance as 0 (first speaker seen) or 1.
    pub fn speaker_ids(&self) -> Vec<usize> {
        let first = self.utterances.first().map(|u| u.speaker.as_str());
        self.utterances
            .iter()
            .map(|u| usize::from(Some(u.speaker.as_str()) != first))
            .collect()
    }

    pub fn causes_of(&self, target: usize) -> impl Iterator<Item = usize> + '_ {
        self.causal_pairs
            .range((target, 0)..=(target, usize::MAX))
            .map(|&(_, c)| c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub emotions: EmotionVocab,
    pub dialogues: Vec<Dialogue>,
    /// Duplicate causal pairs dropped while parsing.
    pub duplicates_removed: usize,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Dialogue> {
        self.dialogues.iter().filter(move |d| d.split == split)
    }

    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }

    /// Copy restricted to one split.
    pub fn subset(&self, split: Split) -> Corpus {
        Corpus {
            emotions: self.emotions.clone(),
            dialogues: self.split(split).cloned().collect(),
            duplicates_removed: 0,
        }
    }
}

// On-disk layout.

#[derive(Debug, Serialize, Deserialize)]
struct CorpusDoc {
    dialogues: Vec<DialogueDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DialogueDoc {
    id: String,
    #[serde(default, skip_serializing_if = "is_train")]
    split: Split,
    utterances: Vec<UtteranceDoc>,
    #[serde(default)]
    causal_pairs: Vec<PairDoc>,
}

fn is_train(s: &Split) -> bool {
    *s == Split::Train
}

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    index: Option<usize>,
    speaker: String,
    text: String,
    emotion: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairDoc {
    target: usize,
    cause: usize,
}

/// Parses and validates a corpus document.
pub fn parse_corpus(document: &str, emotions: &EmotionVocab) -> Result<Corpus> {
    let doc: CorpusDoc = serde_json::from_str(document)?;
    let mut seen_ids = BTreeSet::new();
    let mut dialogues = Vec::with_capacity(doc.dialogues.len());
    let mut duplicates_removed = 0;
    for d in doc.dialogues {
        if !seen_ids.insert(d.id.clone()) {
            return Err(Error::corpus(&d.id, "duplicate dialogue id"));
        }
        let mut utterances = Vec::with_capacity(d.utterances.len());
        let mut speakers = BTreeSet::new();
        for (pos, u) in d.utterances.into_iter().enumerate() {
            if let Some(index) = u.index {
                if index != pos {
                    return Err(Error::corpus(
                        &d.id,
                        format!("non-contiguous utterance index {index} at position {pos}"),
                    ));
                }
            }
            let emotion = emotions.id(&u.emotion).ok_or_else(|| {
                Error::corpus(&d.id, format!("unknown emotion label `{}`", u.emotion))
            })?;
            speakers.insert(u.speaker.clone());
            if speakers.len() > 2 {
                return Err(Error::corpus(&d.id, "more than two speakers"));
            }
            utterances.push(Utterance {
                index: pos,
                speaker: u.speaker,
                text: u.text,
                emotion,
            });
        }
        let mut causal_pairs = BTreeSet::new();
        for p in &d.causal_pairs {
            if p.target >= utterances.len() || p.cause >= utterances.len() {
                return Err(Error::corpus(
                    &d.id,
                    format!("pair ({}, {}) out of range", p.target, p.cause),
                ));
            }
            if p.cause > p.target {
                return Err(Error::corpus(
                    &d.id,
                    format!("cause {} comes after target {}", p.cause, p.target),
                ));
            }
            if utterances[p.target].emotion == emotions.neutral() {
                return Err(Error::corpus(
                    &d.id,
                    format!("target {} has neutral emotion", p.target),
                ));
            }
            if !causal_pairs.insert((p.target, p.cause)) {
                duplicates_removed += 1;
            }
        }
        dialogues.push(Dialogue {
            id: d.id,
            split: d.split,
            utterances,
            causal_pairs,
        });
    }
    if duplicates_removed > 0 {
        log::info!("removed {duplicates_removed} duplicate causal pairs");
    }
    Ok(Corpus {
        emotions: emotions.clone(),
        dialogues,
        duplicates_removed,
    })
}

/// Inverse of [`parse_corpus`].
pub fn serialize_corpus(corpus: &Corpus) -> String {
    let doc = CorpusDoc {
        dialogues: corpus
            .dialogues
            .iter()
            .map(|d| DialogueDoc {
                id: d.id.clone(),
                split: d.split,
                utterances: d
                    .utterances
                    .iter()
                    .map(|u| UtteranceDoc {
                        index: None,
                        speaker: u.speaker.clone(),
                        text: u.text.clone(),
                        emotion: corpus.emotions.label(u.emotion).to_string(),
                    })
                    .collect(),
                causal_pairs: d
                    .causal_pairs
                    .iter()
                    .map(|&(target, cause)| PairDoc { target, cause })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("corpus serializes")
}

/// One non-neutral target with its history prefix as candidates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CeeSample {
    pub dialogue_id: String,
    pub split: Split,
    pub target: usize,
    /// One entry per candidate `0..=target`.
    pub labels: Vec<u8>,
    pub target_emotion: usize,
    pub emotions: Vec<usize>,
    pub speakers: Vec<usize>,
    /// `target - i` for candidate `i`.
    pub distances: Vec<usize>,
}

impl CeeSample {
    pub fn candidates(&self) -> std::ops::Range<usize> {
        0..self.target + 1
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleSet {
    pub samples: Vec<CeeSample>,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    /// Non-neutral utterances skipped because no cause is annotated.
    pub skipped_without_cause: usize,
}

impl SampleSet {
    pub fn dialogues(&self) -> usize {
        let ids: BTreeSet<&str> = self.samples.iter().map(|s| s.dialogue_id.as_str()).collect();
        ids.len()
    }
}

/// Builds one sample per non-neutral utterance with at least one annotated
/// cause, in corpus order.
pub fn build_samples(corpus: &Corpus) -> SampleSet {
    build_samples_from(corpus.emotions.neutral(), corpus.dialogues.iter())
}

pub fn build_samples_from<'a>(
    neutral: usize,
    dialogues: impl Iterator<Item = &'a Dialogue>,
) -> SampleSet {
    let mut set = SampleSet::default();
    for d in dialogues {
        let speakers = d.speaker_ids();
        for u in &d.utterances {
            if u.emotion == neutral {
                continue;
            }
            let t = u.index;
            let causes: BTreeSet<usize> = d.causes_of(t).collect();
            if causes.is_empty() {
                set.skipped_without_cause += 1;
                continue;
            }
            let labels: Vec<u8> = (0..=t).map(|i| u8::from(causes.contains(&i))).collect();
            let pos = causes.len();
            set.positive_pairs += pos;
            set.negative_pairs += labels.len() - pos;
            set.samples.push(CeeSample {
                dialogue_id: d.id.clone(),
                split: d.split,
                target: t,
                labels,
                target_emotion: u.emotion,
                emotions: d.utterances[..=t].iter().map(|u| u.emotion).collect(),
                speakers: speakers[..=t].to_vec(),
                distances: (0..=t).map(|i| t - i).collect(),
            });
        }
    }
    if set.skipped_without_cause > 0 {
        log::info!(
            "skipped {} non-neutral targets without annotated causes",
            set.skipped_without_cause
        );
    }
    set
}

/// Relative-position bucket of candidate `i` for target `t`.
pub fn relative_position(i: usize, t: usize, p_max: usize) -> Result<usize> {
    if i > t {
        return Err(Error::precondition(
            "relative_position",
            format!("candidate {i} is after target {t}"),
        ));
    }
    if p_max == 0 {
        return Err(Error::precondition("relative_position", "p_max must be positive"));
    }
    Ok((t - i).min(p_max - 1))
}

/// Per-utterance emotion labels supplied by an external recognizer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EmotionOverlay {
    labels: HashMap<(String, usize), usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OverlayRecord {
    dialogue_id: String,
    utterance_index: usize,
    emotion: String,
}

impl EmotionOverlay {
    pub fn parse(document: &str, emotions: &EmotionVocab) -> Result<Self> {
        let records: Vec<OverlayRecord> = serde_json::from_str(document)?;
        let mut labels = HashMap::with_capacity(records.len());
        for r in records {
            let id = emotions.id(&r.emotion).ok_or_else(|| {
                Error::corpus(&r.dialogue_id, format!("unknown emotion label `{}`", r.emotion))
            })?;
            labels.insert((r.dialogue_id, r.utterance_index), id);
        }
        Ok(Self { labels })
    }

    pub fn to_document(&self, emotions: &EmotionVocab) -> String {
        let mut records: Vec<OverlayRecord> = self
            .labels
            .iter()
            .map(|((d, i), e)| OverlayRecord {
                dialogue_id: d.clone(),
                utterance_index: *i,
                emotion: emotions.label(*e).to_string(),
            })
            .collect();
        records.sort_by(|a, b| (&a.dialogue_id, a.utterance_index).cmp(&(&b.dialogue_id, b.utterance_index)));
        serde_json::to_string_pretty(&records).expect("overlay serializes")
    }

    pub fn insert(&mut self, dialogue_id: &str, index: usize, emotion: usize) {
        self.labels.insert((dialogue_id.to_string(), index), emotion);
    }

    pub fn get(&self, dialogue_id: &str, index: usize) -> Option<usize> {
        self.labels.get(&(dialogue_id.to_string(), index)).copied()
    }

    /// Overlay labels for every candidate of `sample`.
    pub fn emotions_for(&self, sample: &CeeSample) -> Result<Vec<usize>> {
        sample
            .candidates()
            .map(|i| {
                self.get(&sample.dialogue_id, i).ok_or_else(|| {
                    Error::corpus(
                        &sample.dialogue_id,
                        format!("emotion overlay has no label for utterance {i}"),
                    )
                })
            })
            .collect()
    }
}
