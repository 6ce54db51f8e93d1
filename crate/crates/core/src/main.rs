use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kbcin::dataset::{parse_corpus, serialize_corpus, EmotionOverlay, EmotionVocab, Split};
use kbcin::dataset::synthetic::{generate_synthetic, SynthConfig};
use kbcin::error::{read_file, write_file};
use kbcin::kbci::Bridges;
use kbcin::knowledge::{load_store, synthesize_store};
use kbcin::prediction::predictions_to_jsonl;
use kbcin::trainer::{
    attention_records, evaluate_run, prepare_split, to_jsonl, train_seeds, Checkpoint, EmotionMode, EvalOverrides,
    TrainConfig,
};
use kbcin::Result;

#[derive(Parser)]
#[command(name = "kbcin", version, about = "Causal emotion entailment with knowledge-bridged interaction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and report seed-averaged test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Write a synthetic corpus with a planted cause rule.
    GenSynth(GenSynthArgs),
    /// Write a synthetic knowledge file for a corpus.
    GenKnowledge(GenKnowledgeArgs),
    /// Write per-sample attention weights of a checkpoint.
    DumpAttention(DumpArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    knowledge: PathBuf,
    /// Comma-separated emotion labels; must include "neutral".
    #[arg(long, value_delimiter = ',')]
    emotions: Option<Vec<String>>,
}

#[derive(Args)]
struct BridgeArgs {
    #[arg(long)]
    disable_s_bridge: bool,
    #[arg(long)]
    disable_e_bridge: bool,
    #[arg(long)]
    disable_a_bridge: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    bridges: BridgeArgs,
    #[arg(long)]
    emotion_mode: Option<EmotionMode>,
    #[arg(long)]
    heads: Option<usize>,
    /// Train a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    emotion_mode: Option<EmotionMode>,
    /// Predicted emotion labels, required in predicted mode.
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[command(flatten)]
    bridges: BridgeArgs,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenKnowledgeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

fn emotion_vocab(labels: &Option<Vec<String>>) -> Result<EmotionVocab> {
    match labels {
        Some(l) => EmotionVocab::new(l.clone()),
        None => Ok(EmotionVocab::default()),
    }
}

fn load_data(args: &DataArgs) -> Result<(kbcin::dataset::Corpus, kbcin::knowledge::KnowledgeStore)> {
    let corpus = parse_corpus(&read_file(&args.corpus)?, &emotion_vocab(&args.emotions)?)?;
    let store = load_store(&read_file(&args.knowledge)?, &corpus)?;
    Ok((corpus, store))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn override_bridges(base: Bridges, args: &BridgeArgs) -> Bridges {
    Bridges {
        s: base.s && !args.disable_s_bridge,
        e: base.e && !args.disable_e_bridge,
        a: base.a && !args.disable_a_bridge,
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.disable_s_bridge |= args.bridges.disable_s_bridge;
    cfg.disable_e_bridge |= args.bridges.disable_e_bridge;
    cfg.disable_a_bridge |= args.bridges.disable_a_bridge;
    if let Some(m) = args.emotion_mode {
        cfg.emotion_mode = m;
    }
    if let Some(h) = args.heads {
        cfg.heads = h;
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    let (corpus, store) = load_data(&args.data)?;
    let (runs, average) = train_seeds(&corpus, &store, &cfg)?;
    let out = &args.out_dir;
    write_file(&out.join("config.toml"), &toml::to_string(&cfg).expect("config serializes"))?;
    for run in &runs {
        let s = run.seed;
        run.checkpoint.save(&out.join(format!("checkpoint-seed{s}.json")))?;
        write_file(&out.join(format!("history-seed{s}.jsonl")), &to_jsonl(&run.history)?)?;
        write_file(
            &out.join(format!("predictions-seed{s}.jsonl")),
            &predictions_to_jsonl(&run.test_predictions),
        )?;
        write_json(&out.join(format!("metrics-seed{s}.json")), &run.test.rounded())?;
    }
    write_json(&out.join("metrics.json"), &average)?;
    println!(
        "test over {} seed(s): neg F1 {:.2}, pos F1 {:.2}, macro F1 {:.2}",
        average.seeds.len(),
        average.neg_f1,
        average.pos_f1,
        average.macro_f1
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let (corpus, store) = load_data(&args.data)?;
    let overlay = args
        .overlay
        .as_ref()
        .map(|p| read_file(p).and_then(|d: String| EmotionOverlay::parse(&d, &corpus.emotions)))
        .transpose()?;
    let overrides = EvalOverrides {
        emotion_mode: args.emotion_mode,
        overlay: overlay.as_ref(),
        bridges: Some(override_bridges(checkpoint.model_config.bridges, &args.bridges)),
        threshold: args.threshold,
    };
    let (metrics, predictions) = evaluate_run(&checkpoint, &corpus, &store, args.split, &overrides)?;
    write_file(&args.out_dir.join("predictions.jsonl"), &predictions_to_jsonl(&predictions))?;
    write_json(&args.out_dir.join("metrics.json"), &metrics.rounded())?;
    let r = metrics.rounded();
    println!("neg F1 {:.2}, pos F1 {:.2}, macro F1 {:.2}", r.neg_f1, r.pos_f1, r.macro_f1);
    Ok(())
}

fn gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => toml::from_str(&read_file(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let corpus = generate_synthetic(&cfg)?;
    write_file(&args.out, &serialize_corpus(&corpus))
}

fn gen_knowledge(args: GenKnowledgeArgs) -> Result<()> {
    let corpus = parse_corpus(&read_file(&args.corpus)?, &EmotionVocab::default())?;
    let store = synthesize_store(&corpus, args.dim, args.seed)?;
    write_file(&args.out, &store.to_jsonl())
}

fn dump_attention(args: DumpArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let (corpus, store) = load_data(&args.data)?;
    let model = checkpoint.model(None)?;
    let cfg = &checkpoint.train_config;
    let mode = match cfg.emotion_mode {
        EmotionMode::Predicted => EmotionMode::Gold,
        m => m,
    };
    let inputs = prepare_split(&corpus, args.split, &checkpoint.vocabulary, &store, cfg.p_max, mode, None)?;
    let records = attention_records(&model, &checkpoint.vocabulary, &inputs)?;
    write_file(&args.out, &to_jsonl(&records)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::GenKnowledge(a) => gen_knowledge(a),
        Command::DumpAttention(a) => dump_attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
