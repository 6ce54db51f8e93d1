//! Knowledge-bridged causal interaction heads.
//!
//! One head runs three modules over the candidates `0..=t` of a sample:
//! graph attention on the causal conversation graph with event-centered
//! knowledge in the edge scores (S-bridge), emotional interaction against the
//! target with reaction knowledge (E-bridge), and actional interaction with
//! intention knowledge (A-bridge). The head output is the sum of the three;
//! heads run in parallel and are concatenated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, Tape, Tensor, Var};
use crate::params::{Bindings, Initializer, Linear, ParamId, ParamStore};

/// Directed graph over `0..nodes` with an edge `j -> i` for every `j <= i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConversationGraph {
    nodes: usize,
}

pub fn build_graph(target: usize) -> ConversationGraph {
    ConversationGraph { nodes: target + 1 }
}

impl ConversationGraph {
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// `N_i`: every utterance up to and including `i`.
    pub fn in_neighbors(&self, i: usize) -> std::ops::Range<usize> {
        0..(i + 1).min(self.nodes)
    }

    /// Edges as `(source, destination)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.nodes)
            .flat_map(|i| self.in_neighbors(i).map(move |j| (j, i)))
            .collect()
    }

    /// Row-major `[nodes x nodes]` adjacency, `mask[i][j]` true iff `j -> i`.
    pub fn mask(&self) -> Vec<bool> {
        let n = self.nodes;
        (0..n * n).map(|k| k % n <= k / n).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bridges {
    pub s: bool,
    pub e: bool,
    pub a: bool,
}

impl Default for Bridges {
    fn default() -> Self {
        Self {
            s: true,
            e: true,
            a: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphActivation {
    #[default]
    Elu,
    LeakyRelu,
    Sigmoid,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KbciConfig {
    pub d_h: usize,
    pub leaky_slope: f64,
    pub activation: GraphActivation,
    pub bridges: Bridges,
}

impl KbciConfig {
    fn activation(&self) -> Activation {
        match self.activation {
            GraphActivation::Elu => Activation::Elu(1.0),
            GraphActivation::LeakyRelu => Activation::LeakyRelu(self.leaky_slope),
            GraphActivation::Sigmoid => Activation::Sigmoid,
            GraphActivation::Gelu => Activation::Gelu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionParams {
    pub f_q: Linear,
    pub f_k: Linear,
    pub f_v: Linear,
    pub f_e: Linear,
}

impl InteractionParams {
    fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, d: usize) -> Self {
        Self {
            f_q: Linear::new(store, init, &format!("{name}.f_q"), d, d, true),
            f_k: Linear::new(store, init, &format!("{name}.f_k"), d, d, true),
            f_v: Linear::new(store, init, &format!("{name}.f_v"), d, d, true),
            f_e: Linear::new(store, init, &format!("{name}.f_e"), d, d, true),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.f_q, self.f_k, self.f_v, self.f_e]
            .iter()
            .flat_map(Linear::params)
            .collect()
    }
}

/// Parameters of one head; every head owns an independent set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub w_h: ParamId,
    pub w_e: ParamId,
    /// Attention vector `a`, `[2 d_h x 1]`; the first half scores the
    /// destination node, the second half the source.
    pub attn: ParamId,
    pub emo: InteractionParams,
    pub act: InteractionParams,
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, d: usize) -> Self {
        Self {
            w_h: store.add(format!("{name}.w_h"), init.matrix(d, d)),
            w_e: store.add(format!("{name}.w_e"), init.matrix(d, d)),
            attn: store.add(format!("{name}.attn"), init.matrix(2 * d, 1)),
            emo: InteractionParams::new(store, init, &format!("{name}.emo"), d),
            act: InteractionParams::new(store, init, &format!("{name}.act"), d),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_h, self.w_e, self.attn];
        ids.extend(self.emo.params());
        ids.extend(self.act.params());
        ids
    }
}

/// Node state shared by all heads.
#[derive(Clone, Copy, Debug)]
pub struct NodeState {
    /// `[n x d_h]`
    pub h: Var,
    /// Emotion embedding of the target, `[1 x d_h]`; `None` without emotions.
    pub target_emotion: Option<Var>,
}

/// `h_i = W_init (c_i ++ pemb_i ++ eemb_i)`; the emotion part is zero when
/// `emotions` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn init_nodes(
    tape: &mut Tape,
    c: Var,
    pos_table: Var,
    emo_table: Var,
    w_init: Var,
    positions: &[usize],
    emotions: Option<&[usize]>,
    target: usize,
) -> Result<NodeState> {
    let n = tape.value(c).rows();
    if positions.len() != n || emotions.is_some_and(|e| e.len() != n) {
        return Err(Error::Dimension {
            op: "init_nodes",
            lhs: vec![n],
            rhs: vec![positions.len(), emotions.map_or(n, <[usize]>::len)],
        });
    }
    let emo_rows = tape.value(emo_table).rows();
    if let Some(&bad) = emotions.and_then(|e| e.iter().find(|&&e| e >= emo_rows)) {
        return Err(Error::precondition(
            "init_nodes",
            format!("emotion id {bad} out of range for {emo_rows} labels"),
        ));
    }
    let pemb = tape.gather_rows(pos_table, positions)?;
    let d_emo = tape.value(emo_table).cols();
    let (eemb, target_emotion) = match emotions {
        Some(ids) => {
            let e = tape.gather_rows(emo_table, ids)?;
            let et = tape.gather_rows(emo_table, &ids[target..=target])?;
            (e, Some(et))
        }
        None => (tape.constant(Tensor::zeros(&[n, d_emo])), None),
    };
    let joined = tape.concat_cols(&[c, pemb, eemb])?;
    let h = tape.linear(joined, w_init, None)?;
    Ok(NodeState { h, target_emotion })
}

/// Knowledge rows per candidate, already mapped to `d_h`.
#[derive(Clone, Copy, Debug)]
pub struct KnowledgeInputs {
    pub after: Var,
    pub before: Var,
    /// `xReact` or `oReact` depending on the speakers.
    pub react: Var,
    /// `xWant` or `oWant` depending on the speakers.
    pub want: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphAttention {
    pub hhat: Var,
    /// `[n x n]`, row `i` is the distribution over `N_i`.
    pub alpha: Var,
}

/// `hhat_i = sigma(sum_j alpha_ij W_h h_j)` with
/// `alpha_i = softmax_{j <= i} LeakyReLU(a^T [W_h h_i || W_h h_j + W_e K^af_j + W_e K^bf_j])`.
pub fn csk_graph_attention(
    tape: &mut Tape,
    bind: &Bindings,
    head: &HeadParams,
    cfg: &KbciConfig,
    h: Var,
    knowledge: &KnowledgeInputs,
) -> Result<GraphAttention> {
    let n = tape.value(h).rows();
    let d = cfg.d_h;
    let graph = build_graph(n - 1);
    let wh = tape.matmul(h, bind[head.w_h])?;
    let source = if cfg.bridges.s {
        let ea = tape.matmul(knowledge.after, bind[head.w_e])?;
        let eb = tape.matmul(knowledge.before, bind[head.w_e])?;
        let k = tape.add(ea, eb)?;
        tape.add(wh, k)?
    } else {
        wh
    };
    let a_dst: Vec<usize> = (0..d).collect();
    let a_src: Vec<usize> = (d..2 * d).collect();
    let a1 = tape.gather_rows(bind[head.attn], &a_dst)?;
    let a2 = tape.gather_rows(bind[head.attn], &a_src)?;
    let p = tape.matmul(wh, a1)?;
    let q = tape.matmul(source, a2)?;
    let scores = tape.outer_sum(p, q);
    let scores = tape.leaky_relu(scores, cfg.leaky_slope);
    let alpha = tape.masked_softmax(scores, &graph.mask())?;
    let agg = tape.matmul(alpha, wh)?;
    let hhat = tape.activation(agg, cfg.activation());
    Ok(GraphAttention { hhat, alpha })
}

#[derive(Clone, Copy, Debug)]
pub struct Interaction {
    /// `[n x d_h]`
    pub out: Var,
    /// `[1 x n]` distribution over candidates.
    pub scores: Var,
}

/// Shared structure of the emotional and actional modules:
/// `Q = f_q(query)`, `K_i = f_k(hhat_i) + f_e(K^r_i)`, `V_i = f_v(hhat_i) + f_e(K^r_i)`,
/// `s = softmax(Q K^T / sqrt(d_h))`, `out_i = s_i V_i + s_i Q`.
fn interaction(
    tape: &mut Tape,
    bind: &Bindings,
    p: &InteractionParams,
    d_h: usize,
    hhat: Var,
    query: Var,
    knowledge: Option<Var>,
) -> Result<Interaction> {
    let n = tape.value(hhat).rows();
    let q = p.f_q.forward(tape, bind, query)?;
    let mut k = p.f_k.forward(tape, bind, hhat)?;
    let mut v = p.f_v.forward(tape, bind, hhat)?;
    if let Some(kr) = knowledge {
        let ke = p.f_e.forward(tape, bind, kr)?;
        k = tape.add(k, ke)?;
        v = tape.add(v, ke)?;
    }
    let logits = tape.matmul_bt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (d_h as f64).sqrt());
    let scores = tape.masked_softmax(logits, &vec![true; n])?;
    let vq = tape.add_row(v, q)?;
    let out = tape.row_scale(vq, scores)?;
    Ok(Interaction { out, scores })
}

/// Emotional interaction: query `f_q(h_t + eemb_t)`, reaction knowledge.
#[allow(clippy::too_many_arguments)]
pub fn emotional_interaction(
    tape: &mut Tape,
    bind: &Bindings,
    head: &HeadParams,
    cfg: &KbciConfig,
    hhat: Var,
    h_t: Var,
    target_emotion: Option<Var>,
    react: Var,
) -> Result<Interaction> {
    let query = match target_emotion {
        Some(e) => tape.add(h_t, e)?,
        None => h_t,
    };
    let knowledge = cfg.bridges.e.then_some(react);
    interaction(tape, bind, &head.emo, cfg.d_h, hhat, query, knowledge)
}

/// Actional interaction: query `f_q'(h_t)`, intention knowledge.
pub fn actional_interaction(
    tape: &mut Tape,
    bind: &Bindings,
    head: &HeadParams,
    cfg: &KbciConfig,
    hhat: Var,
    h_t: Var,
    want: Var,
) -> Result<Interaction> {
    let knowledge = cfg.bridges.a.then_some(want);
    interaction(tape, bind, &head.act, cfg.d_h, hhat, h_t, knowledge)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `hhat + h_emo + h_act`, `[n x d_h]`
    pub h_tilde: Var,
    pub graph: GraphAttention,
    pub emotional: Interaction,
    pub actional: Interaction,
}

pub fn head_forward(
    tape: &mut Tape,
    bind: &Bindings,
    head: &HeadParams,
    cfg: &KbciConfig,
    nodes: &NodeState,
    target: usize,
    knowledge: &KnowledgeInputs,
) -> Result<HeadOutput> {
    let graph = csk_graph_attention(tape, bind, head, cfg, nodes.h, knowledge)?;
    let h_t = tape.gather_rows(nodes.h, &[target])?;
    let emotional = emotional_interaction(
        tape,
        bind,
        head,
        cfg,
        graph.hhat,
        h_t,
        nodes.target_emotion,
        knowledge.react,
    )?;
    let actional = actional_interaction(tape, bind, head, cfg, graph.hhat, h_t, knowledge.want)?;
    let sum = tape.add(graph.hhat, emotional.out)?;
    let h_tilde = tape.add(sum, actional.out)?;
    Ok(HeadOutput {
        h_tilde,
        graph,
        emotional,
        actional,
    })
}

/// Concatenation of every head's output, `[n x N d_h]`, in head order.
pub fn multi_head_forward(
    tape: &mut Tape,
    bind: &Bindings,
    heads: &[HeadParams],
    cfg: &KbciConfig,
    nodes: &NodeState,
    target: usize,
    knowledge: &KnowledgeInputs,
) -> Result<(Var, Vec<HeadOutput>)> {
    if heads.is_empty() {
        return Err(Error::precondition("multi_head_forward", "at least one head required"));
    }
    let outputs = heads
        .iter()
        .map(|h| head_forward(tape, bind, h, cfg, nodes, target, knowledge))
        .collect::<Result<Vec<_>>>()?;
    let parts: Vec<Var> = outputs.iter().map(|o| o.h_tilde).collect();
    let joined = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_cols(&parts)?
    };
    Ok((joined, outputs))
}
