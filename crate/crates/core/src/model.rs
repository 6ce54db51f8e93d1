//! Full model: utterance encoder, node initialization, KBCI heads and the
//! scoring head, plus conversion from corpus samples to model inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{relative_position, CeeSample, Dialogue};
use crate::encoder::{encode_all, tokenize, EncoderConfig, EncoderParams, Vocabulary};
use crate::error::{Error, Result};
use crate::kbci::{
    init_nodes, multi_head_forward, Bridges, GraphActivation, HeadOutput, HeadParams, KbciConfig,
    KnowledgeInputs, NodeState,
};
use crate::knowledge::{select_social_relation, KnowledgeStore, RelationKind, SocialAspect};
use crate::numeric::{Tape, Tensor, Var};
use crate::params::{Bindings, Initializer, ParamId, ParamStore};
use crate::prediction::{predict_scores, PredictorParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub d_h: usize,
    pub heads: usize,
    /// Width of the exported knowledge vectors.
    pub d_k: usize,
    pub p_max: usize,
    pub n_emotions: usize,
    pub mlp_hidden: Vec<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub graph_activation: GraphActivation,
    pub bridges: Bridges,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.d_out != self.d_h {
            return Err(Error::Config(format!(
                "encoder projection width {} differs from d_h {}",
                self.encoder.d_out, self.d_h
            )));
        }
        if self.d_h == 0 || self.heads == 0 || self.d_k == 0 || self.p_max == 0 || self.n_emotions == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn kbci(&self) -> KbciConfig {
        KbciConfig {
            d_h: self.d_h,
            leaky_slope: self.leaky_slope,
            activation: self.graph_activation,
            bridges: self.bridges,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub pos_table: ParamId,
    pub emo_table: ParamId,
    pub w_init: ParamId,
    /// Shared knowledge input map `[d_k x d_h]`.
    pub know_map: ParamId,
    pub heads: Vec<HeadParams>,
    pub predictor: PredictorParams,
}

impl Model {
    /// Builds and initializes every parameter from `seed`. Parameter
    /// creation order is fixed, so names and ids are stable across runs.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed));
        let d = config.d_h;
        let encoder = EncoderParams::new(config.encoder.clone(), &mut store, &mut init)?;
        let pos_table = store.add("nodes.pos_table", init.embedding(config.p_max, d));
        let emo_table = store.add("nodes.emo_table", init.embedding(config.n_emotions, d));
        let w_init = store.add("nodes.w_init", init.matrix(3 * d, d));
        let know_map = store.add("knowledge.input_map", init.matrix(config.d_k, d));
        let heads = (0..config.heads)
            .map(|n| HeadParams::new(&mut store, &mut init, &format!("head{n}"), d))
            .collect();
        let predictor = PredictorParams::new(
            &mut store,
            &mut init,
            config.heads * d,
            &config.mlp_hidden,
            config.dropout,
            config.leaky_slope,
        )?;
        Ok(Self {
            config,
            store,
            encoder,
            pos_table,
            emo_table,
            w_init,
            know_map,
            heads,
            predictor,
        })
    }

    /// Utterance features for `tokens`, `[n x d_h]`.
    pub fn encode(&self, tape: &mut Tape, bind: &Bindings, tokens: &[Vec<usize>], cls: usize) -> Result<Var> {
        encode_all(tape, bind, &self.encoder, cls, tokens)
    }

    /// Scores every candidate of `inputs` from precomputed utterance
    /// features; `c` may hold more rows than candidates.
    pub fn forward_from_features(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        c: Var,
        inputs: &SampleInputs,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let n = inputs.candidates();
        let c = if tape.value(c).rows() == n {
            c
        } else {
            tape.gather_rows(c, &(0..n).collect::<Vec<_>>())?
        };
        let nodes = init_nodes(
            tape,
            c,
            bind[self.pos_table],
            bind[self.emo_table],
            bind[self.w_init],
            &inputs.positions,
            inputs.emotions.as_deref(),
            inputs.target,
        )?;
        let mut mapped = Vec::with_capacity(4);
        for k in [&inputs.after, &inputs.before, &inputs.react, &inputs.want] {
            let kv = tape.constant(k.clone());
            mapped.push(tape.linear(kv, bind[self.know_map], None)?);
        }
        let knowledge = KnowledgeInputs {
            after: mapped[0],
            before: mapped[1],
            react: mapped[2],
            want: mapped[3],
        };
        let cfg = self.config.kbci();
        let (features, heads) =
            multi_head_forward(tape, bind, &self.heads, &cfg, &nodes, inputs.target, &knowledge)?;
        let scores = predict_scores(tape, bind, &self.predictor, features, rng)?;
        Ok(ForwardOutput {
            scores,
            features,
            nodes,
            heads,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        inputs: &SampleInputs,
        cls: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let c = self.encode(tape, bind, &inputs.tokens, cls)?;
        self.forward_from_features(tape, bind, c, inputs, rng)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[n x 1]` in (0, 1).
    pub scores: Var,
    /// `[n x N d_h]`
    pub features: Var,
    pub nodes: NodeState,
    pub heads: Vec<HeadOutput>,
}

/// Everything the model reads for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInputs {
    pub dialogue_id: String,
    pub target: usize,
    /// Token ids per candidate `0..=target`.
    pub tokens: Vec<Vec<usize>>,
    pub positions: Vec<usize>,
    /// Per-candidate emotion ids; `None` runs without emotion embeddings.
    pub emotions: Option<Vec<usize>>,
    /// Knowledge rows per candidate, `[n x d_k]` each.
    pub after: Tensor,
    pub before: Tensor,
    pub react: Tensor,
    pub want: Tensor,
    pub labels: Vec<f64>,
}

impl SampleInputs {
    pub fn candidates(&self) -> usize {
        self.target + 1
    }
}

fn knowledge_rows(
    store: &KnowledgeStore,
    dialogue_id: &str,
    relations: impl Iterator<Item = (usize, RelationKind)>,
    n: usize,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * store.dim());
    for (i, rel) in relations {
        let v = store.get(dialogue_id, i, rel).ok_or_else(|| {
            Error::Knowledge(format!("missing vector for ({dialogue_id}, {i}, {rel})"))
        })?;
        data.extend_from_slice(v);
    }
    Tensor::new(vec![n, store.dim()], data)
}

/// Assembles model inputs for `sample`; `emotions` overrides the gold
/// candidate emotions (or removes them with `None`).
pub fn sample_inputs(
    sample: &CeeSample,
    dialogue: &Dialogue,
    vocab: &Vocabulary,
    store: &KnowledgeStore,
    p_max: usize,
    emotions: Option<Vec<usize>>,
) -> Result<SampleInputs> {
    let t = sample.target;
    let n = t + 1;
    if dialogue.id != sample.dialogue_id || dialogue.utterances.len() < n {
        return Err(Error::corpus(&sample.dialogue_id, "sample does not match dialogue"));
    }
    if let Some(e) = &emotions {
        if e.len() != n {
            return Err(Error::Dimension {
                op: "sample_inputs",
                lhs: vec![n],
                rhs: vec![e.len()],
            });
        }
    }
    let tokens = dialogue.utterances[..n]
        .iter()
        .map(|u| tokenize(&u.text, vocab))
        .collect();
    let positions = (0..n)
        .map(|i| relative_position(i, t, p_max))
        .collect::<Result<Vec<_>>>()?;
    let id = &sample.dialogue_id;
    let spk = &sample.speakers;
    let social = |aspect| (0..n).map(move |i| (i, select_social_relation(spk[i], spk[t], aspect)));
    Ok(SampleInputs {
        dialogue_id: id.clone(),
        target: t,
        tokens,
        positions,
        emotions,
        after: knowledge_rows(store, id, (0..n).map(|i| (i, RelationKind::IsAfter)), n)?,
        before: knowledge_rows(store, id, (0..n).map(|i| (i, RelationKind::IsBefore)), n)?,
        react: knowledge_rows(store, id, social(SocialAspect::React), n)?,
        want: knowledge_rows(store, id, social(SocialAspect::Want), n)?,
        labels: sample.labels.iter().map(|&l| f64::from(l)).collect(),
    })
}
