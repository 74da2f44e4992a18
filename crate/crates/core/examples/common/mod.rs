//! Shared setup for the examples: the shipped toy data and a briefly trained
//! base model cached under the system temp directory.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use prunelab::data::{load_eval_task, load_sft, sample_calibration, CalibrationSet, Corpus, SftFormat, Tokenizer, TokenizedCorpus, TrainExample};
use prunelab::evalkit::{ChoiceNormalization, EvalSuite};
use prunelab::finetune::{pretrain, BaseTrainConfig, TrainConfig};
use prunelab::model::{load_checkpoint, save_checkpoint, TrainingMetadata, TransformerModel, TransformerSpec};
use prunelab::Result;

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
}

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn tokenizer() -> Tokenizer {
    Tokenizer::printable_ascii()
}

pub fn corpus(file: &str, tok: &Tokenizer) -> Result<TokenizedCorpus> {
    Corpus::load(&data_dir().join(file))?.tokenize(tok)
}

pub fn calibration(tok: &Tokenizer, count: usize, seed: u64) -> Result<CalibrationSet> {
    sample_calibration(&corpus("wiki_toy.txt", tok)?, count, 64, seed)
}

pub fn sft(tok: &Tokenizer) -> Result<Vec<TrainExample>> {
    load_sft(&data_dir().join("alpaca_toy.jsonl"), SftFormat::Alpaca, 128)?.examples(tok)
}

/// Settings that move the toy model within a few seconds.
pub fn recovery_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        lr: 1e-3,
        warmup_steps: 5,
        max_seq_len: 128,
        ..TrainConfig::default()
    }
}

pub fn suite(tok: &Tokenizer) -> Result<EvalSuite> {
    Ok(EvalSuite {
        corpora: vec![corpus("wiki_toy.txt", tok)?, corpus("ptb_toy.txt", tok)?],
        tasks: vec![
            load_eval_task(&data_dir().join("tasks/facts.jsonl"))?,
            load_eval_task(&data_dir().join("tasks/word_order.jsonl"))?,
        ],
        normalization: ChoiceNormalization::Sum,
        window: Some(64),
    })
}

/// Toy base model trained for `PRUNELAB_EXAMPLE_STEPS` steps (default 300).
/// The first call trains and caches; later calls load the cache.
pub fn base_model(tok: &Tokenizer) -> Result<TransformerModel<f32>> {
    let steps: usize = std::env::var("PRUNELAB_EXAMPLE_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(300);
    let cache = std::env::temp_dir().join(format!("prunelab-example-base-{steps}.ckpt"));
    if let Ok(c) = load_checkpoint::<f32>(&cache) {
        if c.model.spec().vocab_size == tok.vocab_size() {
            return Ok(c.model);
        }
    }
    eprintln!("training the toy base model for {steps} steps (cached at {})", cache.display());
    let spec = TransformerSpec::preset("toy-8x64")?.with_vocab(tok.vocab_size());
    let mut model = TransformerModel::new(spec, 0)?;
    let cfg = BaseTrainConfig {
        steps,
        ..BaseTrainConfig::default()
    };
    pretrain(&mut model, &corpus("toy_corpus.txt", tok)?, &cfg)?;
    save_checkpoint(&model, &TrainingMetadata { seed: 0, step: steps as u64, dataset_fingerprint: None }, &cache)?;
    Ok(model)
}
