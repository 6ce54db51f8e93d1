//! Training loop contracts on one seed of the default synthetic setup.

use std::sync::OnceLock;

use proptest::prelude::*;

use kbcin::dataset::synthetic::{generate_synthetic, SynthConfig};
use kbcin::dataset::{Corpus, EmotionOverlay, Split};
use kbcin::knowledge::{synthesize_store, KnowledgeStore};
use kbcin::numeric::Tensor;
use kbcin::trainer::{
    clip_grad_norm, evaluate_run, global_norm, prepare_split, train_run, Checkpoint, EmotionMode, EvalOverrides,
    RunResult, TrainConfig,
};
use kbcin::Error;

fn data() -> &'static (Corpus, KnowledgeStore) {
    static DATA: OnceLock<(Corpus, KnowledgeStore)> = OnceLock::new();
    DATA.get_or_init(|| {
        let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
        let store = synthesize_store(&corpus, 64, 0).unwrap();
        (corpus, store)
    })
}

fn run() -> &'static RunResult {
    static RUN: OnceLock<RunResult> = OnceLock::new();
    RUN.get_or_init(|| {
        let (corpus, store) = data();
        train_run(corpus, store, &TrainConfig::default(), 1).unwrap()
    })
}

#[test]
fn loss_decreases_over_first_ten_epochs() {
    let losses: Vec<f64> = run().history.iter().take(10).map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 10);
    let smoothed: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    assert!(smoothed.windows(2).all(|w| w[1] < w[0]), "{smoothed:?}");
}

#[test]
fn best_checkpoint_reproduces_recorded_valid_macro() {
    let (corpus, store) = data();
    let r = run();
    let ck = &r.checkpoint;
    assert_eq!(ck.epoch, r.best_epoch);
    assert_eq!(r.history[ck.epoch - 1].valid.macro_f1, ck.best_valid_macro);
    let (valid, _) = evaluate_run(ck, corpus, store, Split::Valid, &EvalOverrides::default()).unwrap();
    assert_eq!(valid.macro_f1, ck.best_valid_macro);
    assert!(r.history.iter().all(|e| e.valid.macro_f1 <= ck.best_valid_macro));
}

#[test]
fn saved_checkpoint_reproduces_test_evaluation() {
    let (corpus, store) = data();
    let r = run();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.json");
    r.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, r.checkpoint);
    let (metrics, predictions) = evaluate_run(&loaded, corpus, store, Split::Test, &EvalOverrides::default()).unwrap();
    assert_eq!(metrics, r.test);
    assert_eq!(predictions, r.test_predictions);
}

#[test]
fn none_mode_changes_only_the_emotion_inputs() {
    let (corpus, store) = data();
    let ck = &run().checkpoint;
    let prep = |mode| prepare_split(corpus, Split::Test, &ck.vocabulary, store, ck.train_config.p_max, mode, None).unwrap();
    let (gold, none) = (prep(EmotionMode::Gold), prep(EmotionMode::None));
    assert_eq!(gold.len(), none.len());
    for (g, n) in gold.iter().zip(&none) {
        assert!(g.emotions.is_some() && n.emotions.is_none());
        let mut stripped = g.clone();
        stripped.emotions = None;
        assert_eq!(&stripped, n);
    }
}

#[test]
fn predicted_mode_needs_a_complete_overlay() {
    let (corpus, store) = data();
    let ck = &run().checkpoint;
    let missing = EvalOverrides {
        emotion_mode: Some(EmotionMode::Predicted),
        ..EvalOverrides::default()
    };
    assert!(matches!(
        evaluate_run(ck, corpus, store, Split::Test, &missing),
        Err(Error::Config(_))
    ));
    let mut overlay = EmotionOverlay::default();
    let first = corpus.split(Split::Test).next().unwrap();
    overlay.insert(&first.id, 0, first.utterances[0].emotion);
    let partial = EvalOverrides {
        emotion_mode: Some(EmotionMode::Predicted),
        overlay: Some(&overlay),
        ..EvalOverrides::default()
    };
    assert!(evaluate_run(ck, corpus, store, Split::Test, &partial).is_err());

    // A complete overlay equal to the gold labels reproduces gold mode.
    let mut full = EmotionOverlay::default();
    for d in corpus.split(Split::Test) {
        for u in &d.utterances {
            full.insert(&d.id, u.index, u.emotion);
        }
    }
    let same = EvalOverrides {
        emotion_mode: Some(EmotionMode::Predicted),
        overlay: Some(&full),
        ..EvalOverrides::default()
    };
    let (m, _) = evaluate_run(ck, corpus, store, Split::Test, &same).unwrap();
    assert_eq!(m, run().test);
}

#[test]
fn empty_split_is_a_config_error() {
    let corpus = generate_synthetic(&SynthConfig { n_valid: 0, ..SynthConfig::default() }).unwrap();
    let store = synthesize_store(&corpus, 8, 0).unwrap();
    let err = train_run(&corpus, &store, &TrainConfig::default(), 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

proptest! {
    #[test]
    fn clipping_never_increases_the_norm(
        values in prop::collection::vec(-10.0..10.0f64, 1..20),
        max_norm in 0.01..20.0f64,
    ) {
        let mut grads = vec![Some(Tensor::row(values)), None];
        let before = global_norm(&grads);
        prop_assert_eq!(clip_grad_norm(&mut grads, max_norm), before);
        let after = global_norm(&grads);
        prop_assert!(after <= before);
        prop_assert!(after <= max_norm * (1.0 + 1e-12));
    }
}

#[test]
fn shipped_full_scale_config_is_valid() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/full-scale.toml");
    let cfg = TrainConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!((cfg.learning_rate, cfg.d_h, cfg.heads, cfg.batch_size), (4e-5, 300, 2, 8));
    cfg.model_config(1000, 768, 7).validate().unwrap();
}
