//! Acceptance criteria. Every test prints one `PASS`/`FAIL`/`SKIP` line;
//! run with `cargo test --test acceptance -- --nocapture` to see them.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kbcin::dataset::{build_samples, parse_corpus, Corpus, EmotionOverlay, EmotionVocab, Split};
use kbcin::dataset::synthetic::{generate_synthetic, SynthConfig};
use kbcin::encoder::{EncoderConfig, Vocabulary};
use kbcin::error::read_file;
use kbcin::kbci::{Bridges, GraphActivation};
use kbcin::knowledge::{synthesize_store, KnowledgeStore};
use kbcin::model::{sample_inputs, Model, ModelConfig, SampleInputs};
use kbcin::numeric::{grad_check, Tape, Tensor};
use kbcin::params::Bindings;
use kbcin::prediction::{macro_from_reported, predictions_to_jsonl};
use kbcin::trainer::{
    attention_records, evaluate_run, prepare_split, to_jsonl, train_run, train_seeds, EmotionMode, EvalOverrides,
    RunResult, SeedAverage, TrainConfig,
};

fn report(name: &str, pass: bool, detail: &str) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn synthetic() -> &'static (Corpus, KnowledgeStore) {
    static DATA: OnceLock<(Corpus, KnowledgeStore)> = OnceLock::new();
    DATA.get_or_init(|| {
        let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
        let store = synthesize_store(&corpus, 64, 0).unwrap();
        (corpus, store)
    })
}

/// Default-config runs over the default seeds, shared by several criteria.
fn full_runs() -> &'static (Vec<RunResult>, SeedAverage, Duration) {
    static RUNS: OnceLock<(Vec<RunResult>, SeedAverage, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let (corpus, store) = synthetic();
        let start = Instant::now();
        let (runs, avg) = train_seeds(corpus, store, &TrainConfig::default()).unwrap();
        (runs, avg, start.elapsed())
    })
}

const TABLE2: [(&str, f64, f64, f64); 9] = [
    ("KAG", 86.35, 58.18, 72.26),
    ("Adapted", 88.18, 64.53, 76.36),
    ("ECPE-2D", 94.96, 55.50, 75.23),
    ("ECPE-MLL", 94.68, 48.48, 71.59),
    ("RankCP", 97.30, 33.00, 65.15),
    ("RoBERTa-Base", 88.74, 64.28, 76.51),
    ("RoBERTa-Large", 87.89, 66.23, 77.06),
    ("KEC", 88.85, 66.55, 77.70),
    ("KBCIN", 89.65, 68.59, 79.12),
];

/// The reported ECPE-MLL macro is 0.01 above the mean of its own pair, so this
/// row cannot be reproduced by any rounding of the arithmetic mean.
const IRREPRODUCIBLE: &str = "ECPE-MLL";

#[test]
fn metric_arithmetic() {
    let mut failed = Vec::new();
    for (name, neg, pos, reported) in TABLE2 {
        let got = macro_from_reported(neg, pos);
        if got != reported {
            failed.push(format!("{name} gives {got:.2}, reported {reported:.2}"));
        }
    }
    let detail = if failed.is_empty() {
        "9/9 rows".to_string()
    } else {
        format!("{}/9 rows; {}", 9 - failed.len(), failed.join("; "))
    };
    report("metric arithmetic", failed.is_empty(), &detail);
    for (name, neg, pos, reported) in TABLE2 {
        if name != IRREPRODUCIBLE {
            assert_eq!(macro_from_reported(neg, pos), reported, "{name}");
        }
    }
}

#[test]
#[ignore = "the reported macro F1 of this row is not the mean of its (neg, pos) pair"]
fn metric_arithmetic_irreproducible_row() {
    let (_, neg, pos, reported) = TABLE2.iter().find(|r| r.0 == IRREPRODUCIBLE).unwrap();
    assert_eq!(macro_from_reported(*neg, *pos), *reported);
}

fn tiny_model() -> (Model, Vocabulary, SampleInputs) {
    let texts = ["we got a gift today", "the gift was lovely", "i love this scarf"];
    let vocab = Vocabulary::build(texts);
    let config = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            layers: 1,
            heads: 2,
            d_ff: 16,
            max_len: 8,
            d_out: 8,
        },
        d_h: 8,
        heads: 2,
        d_k: 4,
        p_max: 4,
        n_emotions: 7,
        mlp_hidden: vec![8],
        dropout: 0.0,
        leaky_slope: 0.01,
        graph_activation: GraphActivation::Elu,
        bridges: Bridges::default(),
    };
    let model = Model::new(config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut know = || Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let inputs = SampleInputs {
        dialogue_id: "d".into(),
        target: 2,
        tokens: texts.iter().map(|t| kbcin::encoder::tokenize(t, &vocab)).collect(),
        positions: vec![2, 1, 0],
        emotions: Some(vec![3, 0, 3]),
        after: know(),
        before: know(),
        react: know(),
        want: know(),
        labels: vec![1.0, 0.0, 1.0],
    };
    (model, vocab, inputs)
}

#[test]
fn gradient_fidelity() {
    let start = Instant::now();
    let (model, vocab, inputs) = tiny_model();
    let params: Vec<Tensor> = model.store.ids().map(|id| model.store.get(id).clone()).collect();
    let check = grad_check(&params, 1e-6, |tape, vars| {
        let bind = Bindings::from_vars(vars.to_vec());
        let out = model.forward(tape, &bind, &inputs, vocab.cls(), None)?;
        tape.bce_loss(out.scores, &inputs.labels, 1.0)
    })
    .unwrap();
    let pass = check.max_rel_error < 1e-4;
    report(
        "gradient fidelity",
        pass,
        &format!(
            "max relative error {:.2e} at {} over {} scalars in {:.1?}",
            check.max_rel_error,
            model.store.names()[check.param],
            model.store.num_scalars(),
            start.elapsed()
        ),
    );
    assert!(pass, "{check:?}");
}

/// Replaces every field the model reads for candidate `j` with unrelated values.
fn perturb_candidate(inputs: &mut SampleInputs, j: usize, vocab_size: usize, rng: &mut ChaCha8Rng) {
    let len = rng.gen_range(1..6);
    inputs.tokens[j] = (0..len).map(|_| rng.gen_range(2..vocab_size)).collect();
    if let Some(e) = inputs.emotions.as_mut() {
        e[j] = (e[j] + rng.gen_range(1..7)) % 7;
    }
    for k in [&mut inputs.after, &mut inputs.before, &mut inputs.react, &mut inputs.want] {
        let cols = k.cols();
        k.data_mut()[j * cols..(j + 1) * cols]
            .iter_mut()
            .for_each(|x| *x = rng.gen_range(-1.0..1.0));
    }
}

#[test]
fn causality_invariant() {
    let (corpus, store) = synthetic();
    let cfg = TrainConfig::default();
    let vocab = Vocabulary::build(corpus.split(Split::Train).flat_map(|d| d.utterances.iter().map(|u| u.text.as_str())));
    let model = Model::new(cfg.model_config(vocab.len(), store.dim(), corpus.emotions.len()), 5).unwrap();
    let samples = build_samples(corpus).samples;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    let mut violations = 0;
    for _ in 0..100 {
        let sample = &samples[rng.gen_range(0..samples.len())];
        let dialogue = corpus.dialogue(&sample.dialogue_id).unwrap();
        let t = sample.target;
        let base = sample_inputs(sample, dialogue, &vocab, store, cfg.p_max, Some(sample.emotions.clone())).unwrap();

        let mut tape = Tape::new();
        let bind = model.store.bind_frozen(&mut tape);
        let out = model.forward(&mut tape, &bind, &base, vocab.cls(), None).unwrap();
        let scores = tape.value(out.scores).clone();
        let hhat: Vec<Tensor> = out.heads.iter().map(|h| tape.value(h.graph.hhat).clone()).collect();

        // Utterances after the target: rewrite them in the dialogue itself.
        if t + 1 < dialogue.utterances.len() {
            let mut changed = dialogue.clone();
            for u in &mut changed.utterances[t + 1..] {
                u.text = "lottery jackpot twins comet".into();
                u.emotion = (u.emotion + 1) % corpus.emotions.len();
            }
            let again = sample_inputs(sample, &changed, &vocab, store, cfg.p_max, Some(sample.emotions.clone())).unwrap();
            let mut tape = Tape::new();
            let bind = model.store.bind_frozen(&mut tape);
            let o = model.forward(&mut tape, &bind, &again, vocab.cls(), None).unwrap();
            checked += 1;
            if tape.value(o.scores).data() != scores.data() {
                violations += 1;
            }
        }

        // Graph outputs: row i may not depend on any candidate j > i.
        if t > 0 {
            let j = rng.gen_range(1..=t);
            let mut changed = base.clone();
            perturb_candidate(&mut changed, j, vocab.len(), &mut rng);
            let mut tape = Tape::new();
            let bind = model.store.bind_frozen(&mut tape);
            let o = model.forward(&mut tape, &bind, &changed, vocab.cls(), None).unwrap();
            for (h, before) in o.heads.iter().zip(&hhat) {
                let after = tape.value(h.graph.hhat);
                for i in 0..j {
                    checked += 1;
                    if after.row_slice(i) != before.row_slice(i) {
                        violations += 1;
                    }
                }
            }
        }
    }
    let pass = violations == 0 && checked > 100;
    report("causality invariant", pass, &format!("{violations} changed outputs in {checked} checks over 100 samples"));
    assert!(pass);
}

#[test]
fn normalization() {
    let (corpus, store) = synthetic();
    let (runs, _, _) = full_runs();
    let checkpoint = &runs[0].checkpoint;
    let mut fresh = checkpoint.clone();
    let untrained = Model::new(checkpoint.model_config.clone(), checkpoint.seed).unwrap();
    fresh.params = untrained
        .store
        .ids()
        .map(|id| (untrained.store.name(id).to_string(), untrained.store.get(id).clone()))
        .collect();
    let inputs = prepare_split(corpus, Split::Train, &checkpoint.vocabulary, store, checkpoint.train_config.p_max, EmotionMode::Gold, None).unwrap();
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for ck in [&fresh, checkpoint] {
        let model = ck.model(None).unwrap();
        for r in attention_records(&model, &ck.vocabulary, &inputs).unwrap() {
            for row in &r.alpha {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
            worst = worst.max((r.s_emo.iter().sum::<f64>() - 1.0).abs());
            worst = worst.max((r.s_act.iter().sum::<f64>() - 1.0).abs());
            rows += 2;
        }
    }
    let pass = worst <= 1e-9;
    report(
        "normalization",
        pass,
        &format!("max |sum - 1| = {worst:.1e} over {rows} distributions, untrained and trained, one train epoch"),
    );
    assert!(pass);
}

#[test]
fn learnability() {
    let (runs, avg, elapsed) = full_runs();
    let best_train: Vec<f64> = runs
        .iter()
        .map(|r| r.history.iter().map(|e| e.train.pos_f1).fold(0.0, f64::max))
        .collect();
    let epochs = runs.iter().map(|r| r.history.len()).max().unwrap_or(0);
    let pass = best_train.iter().all(|&p| p >= 95.0)
        && avg.pos_f1 >= 80.0
        && epochs <= 200
        && *elapsed < Duration::from_secs(600);
    report(
        "learnability",
        pass,
        &format!(
            "best train pos F1 per seed {best_train:.1?}; mean test pos F1 {:.2} over {} seeds; at most {epochs} epochs; {:.0?}",
            avg.pos_f1,
            runs.len(),
            elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn ablation_direction() {
    let (corpus, store) = synthetic();
    let (_, full, _) = full_runs();
    let cfg = TrainConfig {
        disable_s_bridge: true,
        disable_e_bridge: true,
        disable_a_bridge: true,
        ..TrainConfig::default()
    };
    let (_, ablated) = train_seeds(corpus, store, &cfg).unwrap();
    let pairs: Vec<(f64, f64)> = full
        .per_seed
        .iter()
        .zip(&ablated.per_seed)
        .map(|(f, a)| (f.macro_f1, a.macro_f1))
        .collect();
    let pass = pairs.iter().all(|(f, a)| a < f) && ablated.macro_f1 < full.macro_f1;
    report(
        "ablation direction",
        pass,
        &format!(
            "test macro F1 full {:.2} vs no bridges {:.2}; per seed (full, none) {pairs:.2?}",
            full.macro_f1, ablated.macro_f1
        ),
    );
    assert!(pass);
}

#[test]
fn emotion_mode_direction() {
    let (corpus, store) = synthetic();
    let (runs, _, _) = full_runs();
    let mut gold = Vec::new();
    let mut none = Vec::new();
    for r in runs {
        for (mode, out) in [(EmotionMode::Gold, &mut gold), (EmotionMode::None, &mut none)] {
            let overrides = EvalOverrides {
                emotion_mode: Some(mode),
                ..EvalOverrides::default()
            };
            let (m, _) = evaluate_run(&r.checkpoint, corpus, store, Split::Test, &overrides).unwrap();
            out.push(m);
        }
    }
    let seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    let gold = SeedAverage::new(seeds.clone(), gold);
    let none = SeedAverage::new(seeds, none);
    let pass = none.macro_f1 <= gold.macro_f1;
    report(
        "emotion-mode direction",
        pass,
        &format!(
            "mean test macro F1 gold {:.2} vs none {:.2}, same checkpoints, {} seeds",
            gold.macro_f1,
            none.macro_f1,
            gold.seeds.len()
        ),
    );
    assert!(pass);
}

/// Paired evaluation of the same checkpoints with a quarter of the test
/// emotion labels replaced by a different label.
#[test]
fn corrupted_overlay_lowers_macro_f1() {
    let (corpus, store) = synthetic();
    let (runs, full, _) = full_runs();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let n_emotions = corpus.emotions.len();
    let mut overlay = EmotionOverlay::default();
    let (mut total, mut flipped) = (0, 0);
    for d in corpus.split(Split::Test) {
        for u in &d.utterances {
            total += 1;
            let label = if rng.gen_bool(0.25) {
                flipped += 1;
                (u.emotion + rng.gen_range(1..n_emotions)) % n_emotions
            } else {
                u.emotion
            };
            overlay.insert(&d.id, u.index, label);
        }
    }
    let overrides = EvalOverrides {
        emotion_mode: Some(EmotionMode::Predicted),
        overlay: Some(&overlay),
        ..EvalOverrides::default()
    };
    let per_seed = runs
        .iter()
        .map(|r| evaluate_run(&r.checkpoint, corpus, store, Split::Test, &overrides).unwrap().0)
        .collect();
    let corrupted = SeedAverage::new(full.seeds.clone(), per_seed);
    assert!(corrupted.macro_f1 < full.macro_f1, "gold {:.2}, corrupted {:.2} ({flipped}/{total} labels changed)", full.macro_f1, corrupted.macro_f1);
}

/// Writes the files the `train` command writes for one run.
fn write_run(dir: &std::path::Path, run: &RunResult) -> Vec<Vec<u8>> {
    let s = run.seed;
    let files = [
        (format!("metrics-seed{s}.json"), serde_json::to_string_pretty(&run.test.rounded()).unwrap()),
        (format!("history-seed{s}.jsonl"), to_jsonl(&run.history).unwrap()),
        (format!("predictions-seed{s}.jsonl"), predictions_to_jsonl(&run.test_predictions)),
    ];
    files
        .iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            std::fs::write(&path, body).unwrap();
            std::fs::read(&path).unwrap()
        })
        .collect()
}

#[test]
fn determinism() {
    let (corpus, store) = synthetic();
    let cfg = TrainConfig::default();
    let (runs, _, _) = full_runs();
    let again = train_run(corpus, store, &cfg, runs[0].seed).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = write_run(a.path(), &runs[0]);
    let second = write_run(b.path(), &again);
    let params_equal = runs[0].checkpoint.params == again.checkpoint.params;
    let pass = first == second && params_equal;
    report(
        "determinism",
        pass,
        &format!("seed {} trained twice: metrics, history and predictions files byte-identical: {}, parameters identical: {params_equal}", again.seed, first == second),
    );
    assert!(pass);
}

/// Set `KBCIN_RECCON_DD` to a corpus file in the crate's JSON format.
#[test]
fn reccon_dd_pair_counts() {
    let Ok(path) = std::env::var("KBCIN_RECCON_DD") else {
        println!("SKIP reccon-dd pair counts: KBCIN_RECCON_DD not set");
        return;
    };
    let corpus = parse_corpus(&read_file(std::path::Path::new(&path)).unwrap(), &EmotionVocab::default()).unwrap();
    let expected = [(Split::Train, 7027, 20646), (Split::Valid, 328, 838), (Split::Test, 1767, 5330)];
    let mut got = Vec::new();
    for (split, _, _) in expected {
        let set = build_samples(&corpus.subset(split));
        got.push((split, set.positive_pairs, set.negative_pairs));
    }
    let pass = got == expected;
    report("reccon-dd pair counts", pass, &format!("{got:?}"));
    assert!(pass);
}
