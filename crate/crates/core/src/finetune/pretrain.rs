use serde::{Deserialize, Serialize};

use crate::data::{sample_calibration, TokenizedCorpus, TrainExample, BOS};
use crate::error::{Error, Result};
use crate::finetune::{TrainOutcome, Trainer};
use crate::model::TransformerModel;
use crate::numeric::{derive_seed, AdamWConfig, Real};

/// Language-model training of a base model from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Tokens per training window, excluding the leading `<bos>`.
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            seq_len: 64,
            lr: 3e-3,
            warmup_steps: 50,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("base_training.batch_size", "must be positive"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("base_training.seq_len", "must be at least 2"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("base_training.lr", "must be positive"));
        }
        Ok(())
    }
}

/// Each step draws `batch_size` random windows from `corpus` (seed derived
/// from the config seed and the step) and trains on `<bos> window`.
pub fn pretrain<T: Real>(
    model: &mut TransformerModel<T>,
    corpus: &TokenizedCorpus,
    config: &BaseTrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let seq = config.seq_len.min(model.spec().max_seq_len - 1);
    let opt = AdamWConfig {
        lr: config.lr,
        warmup_steps: config.warmup_steps,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut trainer = Trainer::new(opt, seq + 1);
    for step in 0..config.steps {
        let windows = sample_calibration(corpus, config.batch_size, seq, derive_seed(config.seed, step as u64))?;
        let examples: Vec<TrainExample> = windows
            .sequences
            .into_iter()
            .map(|w| {
                let mut tokens = Vec::with_capacity(w.len() + 1);
                tokens.push(BOS);
                tokens.extend(w);
                TrainExample::language_modeling(tokens)
            })
            .collect();
        let refs: Vec<&TrainExample> = examples.iter().collect();
        if let Some(p) = trainer.step(model, &refs)? {
            if p.step % 50 == 0 {
                log::info!("base step {} loss {:.4}", p.step, p.loss);
            }
        }
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::perplexity;
    use crate::model::TransformerSpec;

    #[test]
    fn short_run_beats_untrained_perplexity() {
        let docs: Vec<Vec<u32>> = (0..6).map(|d| (0..200).map(|i| 3 + ((i + d) % 7) as u32).collect()).collect();
        let corpus = TokenizedCorpus {
            name: "cyc".into(),
            documents: docs,
        };
        let spec = TransformerSpec::preset("toy-8x64").unwrap().with_vocab(12).with_layers(2);
        let mut m = TransformerModel::<f32>::new(spec, 0).unwrap();
        let before = perplexity(&m, &corpus, Some(32)).unwrap();
        let cfg = BaseTrainConfig {
            steps: 30,
            batch_size: 4,
            seq_len: 32,
            warmup_steps: 5,
            ..BaseTrainConfig::default()
        };
        pretrain(&mut m, &corpus, &cfg).unwrap();
        let after = perplexity(&m, &corpus, Some(32)).unwrap();
        assert!(after < before, "{after} vs {before}");
    }
}
