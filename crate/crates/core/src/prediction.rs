//! Causal-utterance scoring head and pair-level F1 metrics.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dropout, Tape, Var};
use crate::params::{Bindings, Initializer, Linear, ParamId, ParamStore};

/// MLP `[d_in -> hidden.. -> 1]` with LeakyReLU between layers and a sigmoid
/// on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub layers: Vec<Linear>,
    pub dropout: f64,
    pub slope: f64,
}

impl PredictorParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        d_in: usize,
        hidden: &[usize],
        dropout: f64,
        slope: f64,
    ) -> Result<Self> {
        if d_in == 0 || hidden.contains(&0) {
            return Err(Error::Config("predictor widths must be positive".into()));
        }
        let widths: Vec<usize> = std::iter::once(d_in)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| Linear::new(store, init, &format!("predictor.layer{l}"), w[0], w[1], true))
            .collect();
        Ok(Self {
            layers,
            dropout,
            slope,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// `sigmoid(MLP(feature_i))` for every row, `[n x 1]`. Dropout is applied to
/// hidden activations only when `rng` is given.
pub fn predict_scores(
    tape: &mut Tape,
    bind: &Bindings,
    params: &PredictorParams,
    features: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut x = features;
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        x = layer.forward(tape, bind, x)?;
        if l < last {
            x = tape.leaky_relu(x, params.slope);
            x = dropout(tape, x, params.dropout, rng.as_deref_mut());
        }
    }
    Ok(tape.sigmoid(x))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub dialogue_id: String,
    pub target_index: usize,
    pub candidate_index: usize,
    pub score: f64,
    pub label: u8,
}

impl PairPrediction {
    /// Keeps the score inside the open unit interval even when the sigmoid
    /// saturates in floating point.
    pub fn new(dialogue_id: &str, target: usize, candidate: usize, score: f64, label: u8) -> Self {
        Self {
            dialogue_id: dialogue_id.to_string(),
            target_index: target,
            candidate_index: candidate,
            score: score.clamp(1e-15, 1.0 - 1e-15),
            label,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Confusion matrix with the negative class treated as positive.
    pub fn mirrored(&self) -> Counts {
        Counts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }

    /// F1 in percent; 0 when undefined.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            100.0 * (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Class F1 scores in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub neg_f1: f64,
    pub pos_f1: f64,
    pub macro_f1: f64,
    pub counts: Counts,
}

impl Metrics {
    pub fn from_counts(counts: Counts) -> Self {
        let pos_f1 = counts.f1();
        let neg_f1 = counts.mirrored().f1();
        Self {
            neg_f1,
            pos_f1,
            macro_f1: (neg_f1 + pos_f1) / 2.0,
            counts,
        }
    }

    /// Values as reported: percentages rounded to 2 decimals.
    pub fn rounded(&self) -> Self {
        Self {
            neg_f1: round2(self.neg_f1),
            pos_f1: round2(self.pos_f1),
            macro_f1: round2(self.macro_f1),
            counts: self.counts,
        }
    }
}

/// Rounds to 2 decimals, ties to even. Inputs within 1e-6 of a tie (in units
/// of 0.01) count as ties so that decimal inputs such as 71.585 behave as
/// written.
pub fn round2(x: f64) -> f64 {
    let scaled = ((x * 100.0) * 1e6).round() / 1e6;
    scaled.round_ties_even() / 100.0
}

/// Reported macro F1 from reported class F1 scores.
pub fn macro_from_reported(neg_f1: f64, pos_f1: f64) -> f64 {
    round2((neg_f1 + pos_f1) / 2.0)
}

pub fn confusion(predictions: &[PairPrediction], threshold: f64) -> Counts {
    let mut c = Counts::default();
    for p in predictions {
        match (p.score >= threshold, p.label == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn f1_metrics(predictions: &[PairPrediction], threshold: f64) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::precondition("f1_metrics", "no predictions"));
    }
    Ok(Metrics::from_counts(confusion(predictions, threshold)))
}

pub fn predictions_to_jsonl(predictions: &[PairPrediction]) -> String {
    predictions
        .iter()
        .map(|p| serde_json::to_string(p).expect("prediction serializes") + "\n")
        .collect()
}
