//! Training loop, checkpoints, evaluation and multi-seed reporting.

mod optim;

pub use optim::{clip_grad_norm, global_norm, optimizer_step, AdamState, AdamW};

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_samples_from, CeeSample, Corpus, EmotionOverlay, Split};
use crate::encoder::{EncoderConfig, Vocabulary};
use crate::error::{read_file, write_file, Error, Result};
use crate::kbci::{Bridges, GraphActivation};
use crate::knowledge::KnowledgeStore;
use crate::model::{sample_inputs, Model, ModelConfig, SampleInputs};
use crate::numeric::{Tape, Tensor};
use crate::prediction::{f1_metrics, Metrics, PairPrediction};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionMode {
    #[default]
    Gold,
    /// Trains on gold labels and evaluates with an overlay of predicted ones.
    Predicted,
    None,
}

impl FromStr for EmotionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(Self::Gold),
            "predicted" => Ok(Self::Predicted),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown emotion mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Dialogues per batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a valid macro-F1 improvement before stopping.
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub heads: usize,
    pub d_h: usize,
    pub d_m: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub mlp_hidden: Vec<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub graph_activation: GraphActivation,
    pub emotion_mode: EmotionMode,
    pub disable_s_bridge: bool,
    pub disable_e_bridge: bool,
    pub disable_a_bridge: bool,
    pub p_max: usize,
    pub pos_weight: f64,
    pub threshold: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 3e-4,
            batch_size: 8,
            epochs: 200,
            patience: 10,
            seeds: vec![1, 2, 3, 4, 5],
            heads: 2,
            d_h: 64,
            d_m: 64,
            encoder_layers: 2,
            encoder_heads: 4,
            d_ff: 256,
            max_len: 64,
            mlp_hidden: vec![300, 300, 300],
            dropout: 0.07,
            leaky_slope: 0.01,
            graph_activation: GraphActivation::Elu,
            emotion_mode: EmotionMode::Gold,
            disable_s_bridge: false,
            disable_e_bridge: false,
            disable_a_bridge: false,
            p_max: 40,
            pos_weight: 1.0,
            threshold: 0.5,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_file(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("pos_weight", self.pos_weight),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        let sizes = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("heads", self.heads),
            ("d_h", self.d_h),
            ("d_m", self.d_m),
            ("max_len", self.max_len),
            ("p_max", self.p_max),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) || self.threshold == 0.0 {
            return Err(Error::Config("threshold must be in (0, 1)".into()));
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn bridges(&self) -> Bridges {
        Bridges {
            s: !self.disable_s_bridge,
            e: !self.disable_e_bridge,
            a: !self.disable_a_bridge,
        }
    }

    pub fn model_config(&self, vocab_size: usize, d_k: usize, n_emotions: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size,
                d_model: self.d_m,
                layers: self.encoder_layers,
                heads: self.encoder_heads,
                d_ff: self.d_ff,
                max_len: self.max_len,
                d_out: self.d_h,
            },
            d_h: self.d_h,
            heads: self.heads,
            d_k,
            p_max: self.p_max,
            n_emotions,
            mlp_hidden: self.mlp_hidden.clone(),
            dropout: self.dropout,
            leaky_slope: self.leaky_slope,
            graph_activation: self.graph_activation,
            bridges: self.bridges(),
        }
    }
}

/// Parameters and metadata of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub emotions: Vec<String>,
    pub seed: u64,
    pub epoch: usize,
    pub best_valid_macro: f64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    fn capture(model: &Model, vocab: &Vocabulary, corpus: &Corpus, cfg: &TrainConfig, seed: u64, epoch: usize, best: f64) -> Self {
        Self {
            train_config: cfg.clone(),
            model_config: model.config.clone(),
            vocabulary: vocab.clone(),
            emotions: corpus.emotions.labels().to_vec(),
            seed,
            epoch,
            best_valid_macro: best,
            params: model
                .store
                .ids()
                .map(|id| (model.store.name(id).to_string(), model.store.get(id).clone()))
                .collect(),
        }
    }

    /// Rebuilds the model; `bridges` replaces the stored switches.
    pub fn model(&self, bridges: Option<Bridges>) -> Result<Model> {
        let mut config = self.model_config.clone();
        if let Some(b) = bridges {
            config.bridges = b;
        }
        let mut model = Model::new(config, self.seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            model.store.set(id, value.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_file(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train: Metrics,
    pub valid: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub checkpoint: Checkpoint,
    pub test: Metrics,
    pub test_predictions: Vec<PairPrediction>,
}

/// Test metrics averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAverage {
    pub seeds: Vec<u64>,
    pub neg_f1: f64,
    pub pos_f1: f64,
    pub macro_f1: f64,
    pub per_seed: Vec<Metrics>,
}

impl SeedAverage {
    pub fn new(seeds: Vec<u64>, per_seed: Vec<Metrics>) -> Self {
        let n = per_seed.len().max(1) as f64;
        let mean = |f: fn(&Metrics) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
        Self {
            seeds,
            neg_f1: mean(|m| m.neg_f1),
            pos_f1: mean(|m| m.pos_f1),
            macro_f1: mean(|m| m.macro_f1),
            per_seed,
        }
    }
}

fn split_samples(corpus: &Corpus, split: Split) -> Vec<CeeSample> {
    build_samples_from(corpus.emotions.neutral(), corpus.split(split)).samples
}

/// Emotion ids fed to the model for `sample` under `mode`.
fn emotions_for(sample: &CeeSample, mode: EmotionMode, overlay: Option<&EmotionOverlay>) -> Result<Option<Vec<usize>>> {
    match (mode, overlay) {
        (EmotionMode::None, _) => Ok(None),
        (EmotionMode::Gold, _) | (EmotionMode::Predicted, None) => Ok(Some(sample.emotions.clone())),
        (EmotionMode::Predicted, Some(o)) => o.emotions_for(sample).map(Some),
    }
}

/// Model inputs for every sample of `split`. In predicted mode `overlay`
/// must be given, except for training data.
pub fn prepare_split(
    corpus: &Corpus,
    split: Split,
    vocab: &Vocabulary,
    knowledge: &KnowledgeStore,
    p_max: usize,
    mode: EmotionMode,
    overlay: Option<&EmotionOverlay>,
) -> Result<Vec<SampleInputs>> {
    if mode == EmotionMode::Predicted && split != Split::Train && overlay.is_none() {
        return Err(Error::Config("predicted emotion mode needs an overlay file".into()));
    }
    split_samples(corpus, split)
        .iter()
        .map(|s| {
            let d = corpus
                .dialogue(&s.dialogue_id)
                .ok_or_else(|| Error::corpus(&s.dialogue_id, "dialogue missing"))?;
            let overlay = if split == Split::Train { None } else { overlay };
            sample_inputs(s, d, vocab, knowledge, p_max, emotions_for(s, mode, overlay)?)
        })
        .collect()
}

/// Consecutive runs of samples from the same dialogue, as index ranges.
fn dialogue_groups(inputs: &[SampleInputs]) -> Vec<std::ops::Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=inputs.len() {
        if i == inputs.len() || inputs[i].dialogue_id != inputs[start].dialogue_id {
            groups.push(start..i);
            start = i;
        }
    }
    groups
}

/// Token sequences covering every candidate of a dialogue group.
fn group_tokens(group: &[SampleInputs]) -> &[Vec<usize>] {
    &group
        .iter()
        .max_by_key(|s| s.target)
        .expect("groups are non-empty")
        .tokens
}

pub fn predict(model: &Model, vocab: &Vocabulary, inputs: &[SampleInputs]) -> Result<Vec<PairPrediction>> {
    let mut out = Vec::new();
    for range in dialogue_groups(inputs) {
        let group = &inputs[range];
        let mut tape = Tape::new();
        let bind = model.store.bind_frozen(&mut tape);
        let c = model.encode(&mut tape, &bind, group_tokens(group), vocab.cls())?;
        for s in group {
            let f = model.forward_from_features(&mut tape, &bind, c, s, None)?;
            tape.ensure_finite()?;
            for (i, (&score, &label)) in tape.value(f.scores).data().iter().zip(&s.labels).enumerate() {
                out.push(PairPrediction::new(&s.dialogue_id, s.target, i, score, label as u8));
            }
        }
    }
    Ok(out)
}

/// One optimization step over `batch` (whole dialogues). Returns the mean
/// per-sample loss.
fn train_batch(
    model: &mut Model,
    vocab: &Vocabulary,
    batch: &[&[SampleInputs]],
    cfg: &TrainConfig,
    opt: &AdamW,
    state: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape);
    let mut losses = Vec::new();
    for group in batch {
        let c = model.encode(&mut tape, &bind, group_tokens(group), vocab.cls())?;
        for s in group.iter() {
            let f = model.forward_from_features(&mut tape, &bind, c, s, Some(&mut *rng))?;
            losses.push(tape.bce_loss(f.scores, &s.labels, cfg.pos_weight)?);
        }
    }
    let n = losses.len();
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, 1.0 / n as f64);
    tape.ensure_finite()?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let mut param_grads: Vec<Option<Tensor>> = model.store.ids().map(|id| grads.take(bind[id])).collect();
    if let Some(max) = cfg.clip_norm {
        clip_grad_norm(&mut param_grads, max);
    }
    optimizer_step(&mut model.store, &param_grads, opt, state)?;
    Ok(value)
}

/// Trains one seed: best-valid-macro checkpoint, early stopping, test
/// metrics of the best checkpoint.
pub fn train_run(corpus: &Corpus, knowledge: &KnowledgeStore, cfg: &TrainConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let vocab = Vocabulary::build(corpus.split(Split::Train).flat_map(|d| d.utterances.iter().map(|u| u.text.as_str())));
    let prep = |split| prepare_split(corpus, split, &vocab, knowledge, cfg.p_max, cfg.emotion_mode, None);
    let train = prep(Split::Train)?;
    let valid = prep(Split::Valid)?;
    let test = if cfg.emotion_mode == EmotionMode::Predicted {
        // Predicted labels are applied by `evaluate_run`; report gold here.
        prepare_split(corpus, Split::Test, &vocab, knowledge, cfg.p_max, EmotionMode::Gold, None)?
    } else {
        prep(Split::Test)?
    };
    for (name, set) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if set.is_empty() {
            return Err(Error::Config(format!("{name} split has no samples")));
        }
    }

    let model_config = cfg.model_config(vocab.len(), knowledge.dim(), corpus.emotions.len());
    let mut model = Model::new(model_config, seed)?;
    let opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut state = AdamState::new(&model.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(2);

    let groups = dialogue_groups(&train);
    log::info!(
        "seed {seed}: {} parameters, {} train / {} valid / {} test samples",
        model.store.num_scalars(),
        train.len(),
        valid.len(),
        test.len()
    );
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<std::sync::Arc<Tensor>>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order = groups.clone();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[SampleInputs]> = chunk.iter().map(|r| &train[r.clone()]).collect();
            loss_sum += train_batch(&mut model, &vocab, &batch, cfg, &opt, &mut state, &mut dropout_rng)?;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let train_m = f1_metrics(&predict(&model, &vocab, &train)?, cfg.threshold)?;
        let valid_m = f1_metrics(&predict(&model, &vocab, &valid)?, cfg.threshold)?;
        log::info!(
            "seed {seed} epoch {epoch}: loss {train_loss:.4} train pos {:.2} valid macro {:.2}",
            train_m.pos_f1,
            valid_m.macro_f1
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            train: train_m,
            valid: valid_m,
        });
        if best.as_ref().is_none_or(|b| valid_m.macro_f1 > b.0) {
            best = Some((valid_m.macro_f1, epoch, model.store.snapshot()));
        } else if epoch - best.as_ref().expect("set on first epoch").1 >= cfg.patience {
            log::info!("seed {seed}: early stop at epoch {epoch}");
            break;
        }
    }
    let (best_macro, best_epoch, values) = best.expect("at least one epoch");
    model.store.restore(values);
    let test_predictions = predict(&model, &vocab, &test)?;
    let test_m = f1_metrics(&test_predictions, cfg.threshold)?;
    let checkpoint = Checkpoint::capture(&model, &vocab, corpus, cfg, seed, best_epoch, best_macro);
    Ok(RunResult {
        seed,
        history,
        best_epoch,
        checkpoint,
        test: test_m,
        test_predictions,
    })
}

/// Runs every configured seed and averages test metrics.
pub fn train_seeds(corpus: &Corpus, knowledge: &KnowledgeStore, cfg: &TrainConfig) -> Result<(Vec<RunResult>, SeedAverage)> {
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| train_run(corpus, knowledge, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let avg = SeedAverage::new(cfg.seeds.clone(), runs.iter().map(|r| r.test).collect());
    Ok((runs, avg))
}

#[derive(Clone, Debug, Default)]
pub struct EvalOverrides<'a> {
    pub emotion_mode: Option<EmotionMode>,
    pub overlay: Option<&'a EmotionOverlay>,
    pub bridges: Option<Bridges>,
    pub threshold: Option<f64>,
}

pub fn evaluate_run(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    knowledge: &KnowledgeStore,
    split: Split,
    overrides: &EvalOverrides,
) -> Result<(Metrics, Vec<PairPrediction>)> {
    if corpus.emotions.labels() != checkpoint.emotions.as_slice() {
        return Err(Error::Checkpoint("emotion labels differ from the checkpoint".into()));
    }
    if knowledge.dim() != checkpoint.model_config.d_k {
        return Err(Error::Checkpoint(format!(
            "knowledge width {} differs from the checkpoint's {}",
            knowledge.dim(),
            checkpoint.model_config.d_k
        )));
    }
    let model = checkpoint.model(overrides.bridges)?;
    let cfg = &checkpoint.train_config;
    let mode = overrides.emotion_mode.unwrap_or(cfg.emotion_mode);
    if mode == EmotionMode::Predicted && overrides.overlay.is_none() {
        return Err(Error::Config("predicted emotion mode needs an overlay file".into()));
    }
    let inputs = if split == Split::Train && mode == EmotionMode::Predicted {
        // Training inputs never read the overlay; apply it explicitly here.
        split_samples(corpus, split)
            .iter()
            .map(|s| {
                let d = corpus.dialogue(&s.dialogue_id).expect("sample from corpus");
                sample_inputs(s, d, &checkpoint.vocabulary, knowledge, cfg.p_max, emotions_for(s, mode, overrides.overlay)?)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        prepare_split(corpus, split, &checkpoint.vocabulary, knowledge, cfg.p_max, mode, overrides.overlay)?
    };
    let predictions = predict(&model, &checkpoint.vocabulary, &inputs)?;
    let metrics = f1_metrics(&predictions, overrides.threshold.unwrap_or(cfg.threshold))?;
    Ok((metrics, predictions))
}

/// Per-sample attention weights of every head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub dialogue_id: String,
    pub target_index: usize,
    pub head: usize,
    /// Row `i` holds `alpha_ij` for `j <= i`.
    pub alpha: Vec<Vec<f64>>,
    pub s_emo: Vec<f64>,
    pub s_act: Vec<f64>,
}

pub fn attention_records(model: &Model, vocab: &Vocabulary, inputs: &[SampleInputs]) -> Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for s in inputs {
        let mut tape = Tape::new();
        let bind = model.store.bind_frozen(&mut tape);
        let f = model.forward(&mut tape, &bind, s, vocab.cls(), None)?;
        for (h, head) in f.heads.iter().enumerate() {
            let alpha = tape.value(head.graph.alpha);
            out.push(AttentionRecord {
                dialogue_id: s.dialogue_id.clone(),
                target_index: s.target,
                head: h,
                alpha: (0..alpha.rows()).map(|i| alpha.row_slice(i)[..=i].to_vec()).collect(),
                s_emo: tape.value(head.emotional.scores).data().to_vec(),
                s_act: tape.value(head.actional.scores).data().to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}
