//! Utterance encoder: `[CLS]`-prefixed token sequence through a small
//! pre-norm transformer, max-pooled over positions, then projected to the
//! interaction width.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, Tape, Tensor, Var};
use crate::params::{Bindings, Initializer, Linear, ParamId, ParamStore};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";

/// Token to id map with the three reserved tokens at ids 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from(vec![PAD.to_string(), UNK.to_string(), CLS.to_string()])
    }
}

impl Vocabulary {
    /// Vocabulary over every token of `texts`, in order of first appearance.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::default();
        for text in texts {
            for tok in split_tokens(text) {
                if !vocab.ids.contains_key(&tok) {
                    vocab.ids.insert(tok.clone(), vocab.tokens.len());
                    vocab.tokens.push(tok);
                }
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn unk(&self) -> usize {
        self.ids[UNK]
    }

    pub fn cls(&self) -> usize {
        self.ids[CLS]
    }

    pub fn is_valid(&self) -> bool {
        [PAD, UNK, CLS].iter().all(|t| self.ids.contains_key(*t))
            && self.ids.len() == self.tokens.len()
    }
}

/// Lowercases and splits on whitespace; every punctuation character is a
/// token of its own.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token ids for `text`; out-of-vocabulary tokens map to `[UNK]` and an
/// empty text becomes a single `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let ids: Vec<usize> = split_tokens(text)
        .iter()
        .map(|t| vocab.id(t).unwrap_or_else(|| vocab.unk()))
        .collect();
    if ids.is_empty() {
        vec![vocab.unk()]
    } else {
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Longest token sequence kept, excluding `[CLS]`.
    pub max_len: usize,
    pub d_out: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_out == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder widths and max_len must be positive".into()));
        }
        if self.layers > 0 && (self.heads == 0 || !self.d_model.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "encoder heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    ln1: (ParamId, ParamId),
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    layers: Vec<LayerParams>,
    final_norm: Option<(ParamId, ParamId)>,
    pub projection: ParamId,
}

fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.gain"), Tensor::filled(&[1, d], 1.0)),
        store.add(format!("{name}.bias"), Tensor::zeros(&[1, d])),
    )
}

impl EncoderParams {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, init: &mut Initializer) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = store.add("encoder.token_embedding", init.embedding(config.vocab_size, d));
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                LayerParams {
                    ln1: layer_norm_params(store, &format!("{p}.ln1"), d),
                    wq: Linear::new(store, init, &format!("{p}.wq"), d, d, true),
                    wk: Linear::new(store, init, &format!("{p}.wk"), d, d, true),
                    wv: Linear::new(store, init, &format!("{p}.wv"), d, d, true),
                    wo: Linear::new(store, init, &format!("{p}.wo"), d, d, true),
                    ln2: layer_norm_params(store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(store, init, &format!("{p}.ff1"), d, config.d_ff, true),
                    ff2: Linear::new(store, init, &format!("{p}.ff2"), config.d_ff, d, true),
                }
            })
            .collect();
        let final_norm = (config.layers > 0).then(|| layer_norm_params(store, "encoder.final_norm", d));
        let projection = store.add("encoder.projection", init.matrix(d, config.d_out));
        Ok(Self {
            config,
            token_embedding,
            layers,
            final_norm,
            projection,
        })
    }
}

/// Sinusoidal position table, `[len x d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, d], data).expect("shape matches")
}

/// Truncates `ids` to the configured maximum length. Returns whether
/// anything was dropped.
pub fn truncate(ids: &mut Vec<usize>, max_len: usize) -> bool {
    if ids.len() > max_len {
        ids.truncate(max_len);
        true
    } else {
        false
    }
}

/// Utterance feature `c = maxpool(Transformer([CLS], w_1..w_L))`, `[1 x d_model]`.
pub fn encode_utterance(
    tape: &mut Tape,
    bind: &Bindings,
    params: &EncoderParams,
    cls: usize,
    ids: &[usize],
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::precondition("encode_utterance", "empty token sequence"));
    }
    let cfg = &params.config;
    let ids: Vec<usize> = std::iter::once(cls)
        .chain(ids.iter().copied().take(cfg.max_len))
        .collect();
    let d = cfg.d_model;
    let emb = tape.gather_rows(bind[params.token_embedding], &ids)?;
    let emb = tape.scale(emb, (d as f64).sqrt());
    let pos = tape.constant(sinusoidal_positions(ids.len(), d));
    let mut x = tape.add(emb, pos)?;

    for layer in &params.layers {
        let normed = tape.layer_norm(x, bind[layer.ln1.0], bind[layer.ln1.1], 1e-5)?;
        let attn = self_attention(tape, bind, layer, normed, cfg.heads)?;
        x = tape.add(x, attn)?;
        let normed = tape.layer_norm(x, bind[layer.ln2.0], bind[layer.ln2.1], 1e-5)?;
        let hidden = layer.ff1.forward(tape, bind, normed)?;
        let hidden = tape.activation(hidden, Activation::Gelu);
        let ff = layer.ff2.forward(tape, bind, hidden)?;
        x = tape.add(x, ff)?;
    }
    if let Some((g, b)) = params.final_norm {
        x = tape.layer_norm(x, bind[g], bind[b], 1e-5)?;
    }
    tape.max_pool_rows(x)
}

fn self_attention(
    tape: &mut Tape,
    bind: &Bindings,
    layer: &LayerParams,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let (n, d) = tape.value(x).dims2();
    let dh = d / heads;
    let q = layer.wq.forward(tape, bind, x)?;
    let k = layer.wk.forward(tape, bind, x)?;
    let v = layer.wv.forward(tape, bind, x)?;
    let mask = vec![true; n * n];
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let p = tape.masked_softmax(scores, &mask)?;
        outs.push(tape.matmul(p, vh)?);
    }
    let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    layer.wo.forward(tape, bind, joined)
}

/// Linear projection of stacked utterance features to the interaction width.
pub fn project(tape: &mut Tape, c: Var, w_proj: Var) -> Result<Var> {
    tape.linear(c, w_proj, None)
}

/// Encodes and projects every utterance, `[n x d_out]`.
pub fn encode_all(
    tape: &mut Tape,
    bind: &Bindings,
    params: &EncoderParams,
    cls: usize,
    utterances: &[Vec<usize>],
) -> Result<Var> {
    let rows = utterances
        .iter()
        .map(|ids| encode_utterance(tape, bind, params, cls, ids))
        .collect::<Result<Vec<_>>>()?;
    let c = tape.concat_rows(&rows)?;
    project(tape, c, bind[params.projection])
}
