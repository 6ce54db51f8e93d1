//! Per-utterance commonsense vectors for six relation kinds.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{trigger_emotion, Corpus};
use crate::encoder::split_tokens;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationKind {
    IsAfter,
    IsBefore,
    XReact,
    OReact,
    XWant,
    OWant,
}

impl RelationKind {
    pub const ALL: [RelationKind; 6] = [
        RelationKind::IsAfter,
        RelationKind::IsBefore,
        RelationKind::XReact,
        RelationKind::OReact,
        RelationKind::XWant,
        RelationKind::OWant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::IsAfter => "isAfter",
            RelationKind::IsBefore => "isBefore",
            RelationKind::XReact => "xReact",
            RelationKind::OReact => "oReact",
            RelationKind::XWant => "xWant",
            RelationKind::OWant => "oWant",
        }
    }

    /// `isAfter` and `isBefore`; the rest describe social interaction.
    pub fn is_event_centered(self) -> bool {
        matches!(self, RelationKind::IsAfter | RelationKind::IsBefore)
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RelationKind::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Knowledge(format!("unknown relation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SocialAspect {
    React,
    Want,
}

/// Intra-speaker relation when the speakers match, inter-speaker otherwise.
pub fn select_social_relation<S: PartialEq>(
    speaker_candidate: S,
    speaker_target: S,
    aspect: SocialAspect,
) -> RelationKind {
    let same = speaker_candidate == speaker_target;
    match (aspect, same) {
        (SocialAspect::React, true) => RelationKind::XReact,
        (SocialAspect::React, false) => RelationKind::OReact,
        (SocialAspect::Want, true) => RelationKind::XWant,
        (SocialAspect::Want, false) => RelationKind::OWant,
    }
}

/// Vectors of width `dim` for every (dialogue, utterance, relation).
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeStore {
    dim: usize,
    vectors: BTreeMap<(String, usize), [Vec<f64>; 6]>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    dialogue_id: String,
    utterance_index: usize,
    relation: String,
    vector: Vec<f64>,
}

impl KnowledgeStore {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, dialogue_id: &str, index: usize, rel: RelationKind) -> Option<&[f64]> {
        self.vectors
            .get(&(dialogue_id.to_string(), index))
            .map(|v| v[rel as usize].as_slice())
    }

    pub fn len(&self) -> usize {
        self.vectors.len() * 6
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Line-oriented export: a `{"dim": d}` header then one record per vector.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header { dim: self.dim }).expect("header");
        out.push('\n');
        for ((d, i), rels) in &self.vectors {
            for rel in RelationKind::ALL {
                let rec = Record {
                    dialogue_id: d.clone(),
                    utterance_index: *i,
                    relation: rel.as_str().to_string(),
                    vector: rels[rel as usize].clone(),
                };
                out.push_str(&serde_json::to_string(&rec).expect("record"));
                out.push('\n');
            }
        }
        out
    }
}

/// Reads a knowledge export and checks it covers every utterance of `corpus`.
pub fn load_store(document: &str, corpus: &Corpus) -> Result<KnowledgeStore> {
    let mut lines = document.lines().filter(|l| !l.trim().is_empty());
    let header: Header = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| Error::Knowledge("empty knowledge file".into()))?,
    )?;
    if header.dim == 0 {
        return Err(Error::Knowledge("dimension must be positive".into()));
    }
    let mut partial: BTreeMap<(String, usize), [Option<Vec<f64>>; 6]> = BTreeMap::new();
    for line in lines {
        let rec: Record = serde_json::from_str(line)?;
        let rel: RelationKind = rec.relation.parse()?;
        let utterances = corpus
            .dialogue(&rec.dialogue_id)
            .map(|d| d.utterances.len())
            .ok_or_else(|| Error::Knowledge(format!("unknown dialogue `{}`", rec.dialogue_id)))?;
        if rec.utterance_index >= utterances {
            return Err(Error::Knowledge(format!(
                "dialogue `{}` has no utterance {}",
                rec.dialogue_id, rec.utterance_index
            )));
        }
        if rec.vector.len() != header.dim {
            return Err(Error::Knowledge(format!(
                "vector for ({}, {}, {}) has length {}, header declares {}",
                rec.dialogue_id,
                rec.utterance_index,
                rel,
                rec.vector.len(),
                header.dim
            )));
        }
        if rec.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Knowledge(format!(
                "non-finite vector for ({}, {}, {})",
                rec.dialogue_id, rec.utterance_index, rel
            )));
        }
        let slot = &mut partial
            .entry((rec.dialogue_id.clone(), rec.utterance_index))
            .or_default()[rel as usize];
        if slot.is_some() {
            return Err(Error::Knowledge(format!(
                "duplicate vector for ({}, {}, {})",
                rec.dialogue_id, rec.utterance_index, rel
            )));
        }
        *slot = Some(rec.vector);
    }

    let mut vectors = BTreeMap::new();
    for d in &corpus.dialogues {
        for u in &d.utterances {
            let key = (d.id.clone(), u.index);
            let mut entry = partial.remove(&key).unwrap_or_default();
            for rel in RelationKind::ALL {
                if entry[rel as usize].is_none() {
                    return Err(Error::Knowledge(format!(
                        "missing vector for ({}, {}, {})",
                        d.id, u.index, rel
                    )));
                }
            }
            let full = entry.each_mut().map(|v| v.take().expect("checked above"));
            vectors.insert(key, full);
        }
    }
    Ok(KnowledgeStore {
        dim: header.dim,
        vectors,
    })
}

/// 64-bit FNV-1a over `parts`, separated so `("ab","c") != ("a","bc")`.
fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.iter().chain(std::iter::once(&0xff)) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn unit_gaussian(key: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
}

/// Weight of the trigger direction relative to the unit noise vector.
const TRIGGER_BIAS: f64 = 4.0;
/// Weight of the token-specific part of a trigger direction relative to the
/// shared emotion part.
const TOKEN_SHARE: f64 = 0.5;

/// Direction shared by utterances that carry trigger `token` of `emotion`
/// under relation `rel`. The emotion part is the same for every relation.
fn trigger_direction(emotion: &str, token: &str, rel: RelationKind, dim: usize, seed: u64) -> Vec<f64> {
    let s = seed.to_le_bytes();
    let e = unit_gaussian(stable_hash(&[b"emotion", emotion.as_bytes(), &s]), dim);
    let t = unit_gaussian(stable_hash(&[b"token", token.as_bytes(), rel.as_str().as_bytes(), &s]), dim);
    let mut d: Vec<f64> = e.iter().zip(&t).map(|(a, b)| a + TOKEN_SHARE * b).collect();
    normalize(&mut d);
    d
}

/// Deterministic unit vectors keyed by (dialogue, utterance, relation, seed).
///
/// Utterances containing a trigger token of the synthetic lexicon are pulled
/// toward a direction shared by that (emotion, token) pair, which gives the
/// knowledge paths something learnable on synthetic corpora.
pub fn synthesize_store(corpus: &Corpus, dim: usize, seed: u64) -> Result<KnowledgeStore> {
    if dim == 0 {
        return Err(Error::Knowledge("dimension must be positive".into()));
    }
    let s = seed.to_le_bytes();
    let mut vectors = BTreeMap::new();
    for d in &corpus.dialogues {
        for u in &d.utterances {
            let trigger = split_tokens(&u.text)
                .into_iter()
                .find_map(|tok| trigger_emotion(&tok).map(|e| (e, tok)));
            let idx = (u.index as u64).to_le_bytes();
            let rels = RelationKind::ALL.map(|rel| {
                let key = stable_hash(&[d.id.as_bytes(), &idx, rel.as_str().as_bytes(), &s]);
                let mut v = unit_gaussian(key, dim);
                if let Some((emotion, tok)) = &trigger {
                    let dir = trigger_direction(emotion, tok, rel, dim, seed);
                    v.iter_mut().zip(&dir).for_each(|(x, b)| *x += TRIGGER_BIAS * b);
                    normalize(&mut v);
                }
                v
            });
            vectors.insert((d.id.clone(), u.index), rels);
        }
    }
    Ok(KnowledgeStore { dim, vectors })
}
