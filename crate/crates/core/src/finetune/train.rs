use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{TrainExample, PAD};
use crate::error::{Error, Result};
use crate::finetune::AdaptedModel;
use crate::model::{Binding, TokenBatch, TransformerModel};
use crate::numeric::{AdamW, AdamWConfig, Graph, Real, SeededRng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub rank: usize,
    pub alpha: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Examples longer than this are cut from the right.
    pub max_seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 64,
            lr: 1e-5,
            warmup_steps: 100,
            rank: 8,
            alpha: crate::finetune::DEFAULT_ALPHA,
            weight_decay: 0.0,
            seed: 0,
            max_seq_len: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.rank == 0 {
            return Err(Error::config("rank", "must be positive"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len", "must be at least 2"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Something the trainer can run a loss through and update.
pub trait Trainable<T: Real> {
    /// Records the forward pass; returns logits `[batch*seq, vocab]`.
    fn trace_logits(&self, g: &mut Graph<T>, batch: &TokenBatch) -> Result<Var>;
    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;
    fn max_seq_len(&self) -> usize;
}

impl<T: Real> Trainable<T> for TransformerModel<T> {
    fn trace_logits(&self, g: &mut Graph<T>, batch: &TokenBatch) -> Result<Var> {
        Ok(self.trace(g, batch, None, None, Binding::Training, false)?.logits)
    }
    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.named_params_mut().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }
    fn max_seq_len(&self) -> usize {
        self.spec().max_seq_len
    }
}

impl<T: Real> Trainable<T> for AdaptedModel<T> {
    fn trace_logits(&self, g: &mut Graph<T>, batch: &TokenBatch) -> Result<Var> {
        Ok(self
            .base
            .trace(g, batch, Some(&self.adapters), None, Binding::Training, false)?
            .logits)
    }
    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<_> = self
            .base
            .named_params_mut()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect();
        out.extend(self.adapters.named_params_mut());
        out
    }
    fn max_seq_len(&self) -> usize {
        self.base.spec().max_seq_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<LossPoint>,
    /// Parameter names that received gradients in the last step.
    pub gradient_keys: BTreeSet<String>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.curve.first().map(|p| p.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|p| p.loss)
    }

    /// `step,loss,lr`
    pub fn curve_csv(&self) -> Result<String> {
        curve_csv(&self.curve)
    }
}

pub fn curve_csv(curve: &[LossPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss", "lr"])?;
    for p in curve {
        w.write_record([p.step.to_string(), format!("{:.8}", p.loss), format!("{:e}", p.lr)])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Masked next-token loss: the weighted mean over target positions of a
/// padded batch. Returns `(inputs, targets, weights)`; padding and
/// non-target positions get weight 0.
pub(crate) fn lm_batch(examples: &[&TrainExample], max_len: usize) -> Result<(TokenBatch, Vec<u32>, Vec<f64>)> {
    let len = examples.iter().map(|e| e.tokens.len().min(max_len)).max().unwrap_or(0);
    if len < 2 {
        return Err(Error::Data("training examples need at least 2 tokens".into()));
    }
    let seq = len - 1;
    let mut ids = Vec::with_capacity(examples.len() * seq);
    let mut targets = Vec::with_capacity(examples.len() * seq);
    let mut mask = Vec::with_capacity(examples.len() * seq);
    for e in examples {
        let n = e.tokens.len().min(max_len);
        for p in 0..seq {
            let live = p + 1 < n;
            ids.push(if p < n { e.tokens[p] } else { PAD });
            targets.push(if live { e.tokens[p + 1] } else { PAD });
            mask.push(live && e.loss_mask[p + 1]);
        }
    }
    let count = mask.iter().filter(|&&m| m).count();
    let w = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let weights = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
    Ok((TokenBatch::new(examples.len(), seq, ids)?, targets, weights))
}

/// One optimizer plus the running loss curve; each call to
/// [`Trainer::step`] is one update.
pub struct Trainer<T: Real> {
    opt: AdamW<T>,
    max_len: usize,
    pub curve: Vec<LossPoint>,
    /// Parameter names that received gradients in the last step.
    pub gradient_keys: BTreeSet<String>,
}

impl<T: Real> Trainer<T> {
    /// Sequences longer than `max_len` tokens are cut from the right.
    pub fn new(config: AdamWConfig, max_len: usize) -> Self {
        Self {
            opt: AdamW::new(config),
            max_len,
            curve: Vec::new(),
            gradient_keys: BTreeSet::new(),
        }
    }

    /// Updates `model` on one padded batch. Returns `None` when the batch
    /// has no target positions. A non-finite loss or gradient becomes
    /// [`Error::Diverged`] carrying the curve so far.
    pub fn step<M: Trainable<T> + ?Sized>(&mut self, model: &mut M, batch: &[&TrainExample]) -> Result<Option<LossPoint>> {
        let max_len = self.max_len.min(model.max_seq_len() + 1);
        let (inputs, targets, weights) = lm_batch(batch, max_len)?;
        if weights.iter().all(|&w| w == 0.0) {
            return Ok(None);
        }
        let step = self.curve.len() + 1;
        let forward = || -> Result<_> {
            let mut g = Graph::new();
            let logits = model.trace_logits(&mut g, &inputs)?;
            let loss = g.cross_entropy(logits, &targets, &weights)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "loss" });
            }
            Ok((value, g.backward(loss)?))
        };
        let (loss, grads) = match forward() {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step,
                    curve: self.curve.clone(),
                })
            }
            Err(e) => return Err(e),
        };
        self.gradient_keys = grads.keys().cloned().collect();
        let mut params = model.trainable_mut();
        let lr = self.opt.step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), &grads)?;
        let point = LossPoint { step, loss, lr };
        self.curve.push(point);
        log::debug!("step {step} loss {loss:.5} lr {lr:.2e}");
        Ok(Some(point))
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            curve: self.curve,
            gradient_keys: self.gradient_keys,
        }
    }
}

/// AdamW over shuffled mini-batches for `config.epochs` epochs. Only
/// parameters with `requires_grad` move. Batches whose examples carry no
/// target are skipped. A non-finite loss aborts with the curve so far.
pub fn train<T: Real, M: Trainable<T>>(
    model: &mut M,
    examples: &[TrainExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if model.trainable_mut().is_empty() {
        return Err(Error::Policy("no trainable parameters".into()));
    }
    let mut trainer = Trainer::new(config.optimizer(), config.max_seq_len);
    let mut rng = SeededRng::new(config.seed);
    for _ in 0..config.epochs {
        let order = rng.permutation(examples.len());
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            trainer.step(model, &batch)?;
        }
    }
    Ok(trainer.finish())
}
