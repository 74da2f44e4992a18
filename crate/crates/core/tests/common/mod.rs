#![allow(dead_code)]

use std::path::PathBuf;

use prunelab::data::{sample_calibration, CalibrationSet, Corpus, TokenizedCorpus, Tokenizer};
use prunelab::model::{TransformerModel, TransformerSpec};
use prunelab::numeric::Real;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs")
}

pub fn toy_spec(vocab: usize) -> TransformerSpec {
    TransformerSpec::preset("toy-8x64").unwrap().with_vocab(vocab)
}

pub fn toy<T: Real>(vocab: usize, seed: u64) -> TransformerModel<T> {
    TransformerModel::new(toy_spec(vocab), seed).unwrap()
}

/// Two blocks of width 2: 82 parameters in total.
pub fn micro_spec() -> TransformerSpec {
    let mut s = TransformerSpec::preset("toy-8x64").unwrap();
    s.name = "micro".into();
    s.vocab_size = 4;
    s.hidden = 2;
    s.layers = 2;
    s.heads = 1;
    s.kv_heads = 1;
    s.head_dim = 2;
    s.ffn_hidden = 2;
    s.max_seq_len = 8;
    s
}

pub fn wiki(tok: &Tokenizer) -> TokenizedCorpus {
    Corpus::load(&data_dir().join("wiki_toy.txt")).unwrap().tokenize(tok).unwrap()
}

pub fn wiki_calibration(count: usize, seq: usize, seed: u64) -> CalibrationSet {
    sample_calibration(&wiki(&Tokenizer::printable_ascii()), count, seq, seed).unwrap()
}

/// Cosine in f64 by explicit loops; `None` for a zero row.
pub fn naive_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na.sqrt() * nb.sqrt()))
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

use prunelab::evalkit::nll_sum;
use prunelab::model::MatrixRole;

fn mean_nll(model: &TransformerModel<f64>, calib: &CalibrationSet) -> f64 {
    let (s, n) = nll_sum(model, &calib.sequences).unwrap();
    s / n as f64
}

/// Per block, Σ |central-difference ∂L/∂w · w| over the seven matrices,
/// where L is the mean next-token loss over the calibration positions.
pub fn taylor_by_finite_differences(model: &TransformerModel<f64>, calib: &CalibrationSet, h: f64) -> Vec<f64> {
    (0..model.num_layers())
        .map(|i| {
            let mut total = 0.0;
            for role in MatrixRole::ALL {
                for j in 0..model.layer(i).matrix(role).numel() {
                    let w = model.layer(i).matrix(role).data()[j];
                    let mut plus = model.clone();
                    plus.layer_mut(i).matrix_mut(role).data_mut()[j] = w + h;
                    let mut minus = model.clone();
                    minus.layer_mut(i).matrix_mut(role).data_mut()[j] = w - h;
                    let grad = (mean_nll(&plus, calib) - mean_nll(&minus, calib)) / (2.0 * h);
                    total += (grad * w).abs();
                }
            }
            total
        })
        .collect()
}

/// Block influence by explicit loops over sequences, positions and
/// coordinates: one forward per sequence, zero rows skipped.
pub fn naive_block_influence<T: Real>(model: &TransformerModel<T>, calib: &CalibrationSet) -> Vec<f64> {
    let n = model.num_layers();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for s in &calib.sequences {
        let batch = prunelab::model::TokenBatch::single(s).unwrap();
        let hidden = model.forward_hidden(&batch).unwrap().hidden;
        let width = model.spec().hidden;
        for i in 0..n {
            for p in 0..s.len() {
                let row = |t: &prunelab::numeric::Tensor<T>| -> Vec<f64> {
                    t.data()[p * width..(p + 1) * width].iter().map(|v| v.as_f64()).collect()
                };
                if let Some(c) = naive_cosine(&row(&hidden[i]), &row(&hidden[i + 1])) {
                    sums[i] += c;
                    counts[i] += 1;
                }
            }
        }
    }
    sums.iter().zip(&counts).map(|(s, &c)| 1.0 - s / c as f64).collect()
}

use prunelab::data::{load_sft, SftFormat, TrainExample};
use prunelab::finetune::{apply_freeze, attach_adapters, merge_adapters, train, FreezePolicy, TrainConfig};
use prunelab::model::{LanguageModel, TokenBatch};
use prunelab::numeric::max_abs_diff;

pub fn random_batch(rng: &mut SeededRng, vocab: usize, max_seq: usize) -> TokenBatch {
    let batch = 1 + rng.below(3);
    let seq = 2 + rng.below(max_seq - 1);
    let ids = (0..batch * seq).map(|_| rng.below(vocab) as u32).collect();
    TokenBatch::new(batch, seq, ids).unwrap()
}

use prunelab::numeric::SeededRng;

pub struct MergeCheck {
    /// Largest |adapted − base| over the batches at initialisation.
    pub init_diff: f64,
    /// Largest |merged − adapted| after randomising every `B`.
    pub merge_diff: f64,
}

/// Attaches adapters to every matrix of a toy model, compares forwards at
/// init, randomises the up-projections, then compares merged and adapted
/// logits on `batches` random batches.
pub fn adapter_merge_check(batches: usize, seed: u64) -> MergeCheck {
    let model = toy::<f32>(100, seed);
    let mut rng = SeededRng::new(seed + 1);
    let inputs: Vec<TokenBatch> = (0..batches).map(|_| random_batch(&mut rng, 100, 32)).collect();
    let base: Vec<_> = inputs.iter().map(|b| model.forward(b).unwrap()).collect();
    let mut adapted = attach_adapters(model, &MatrixRole::ALL, 4, 16.0, seed).unwrap();
    let init_diff = inputs
        .iter()
        .zip(&base)
        .map(|(b, want)| max_abs_diff(&adapted.logits(b).unwrap(), want))
        .fold(0.0, f64::max);
    for p in adapted.adapters.pairs_mut() {
        let shape = p.b.shape().to_vec();
        p.b = prunelab::numeric::Tensor::randn(shape, 0.05, &mut rng).with_requires_grad(true);
    }
    let via_adapters: Vec<_> = inputs.iter().map(|b| adapted.logits(b).unwrap()).collect();
    let merged = merge_adapters(adapted).unwrap();
    let merge_diff = inputs
        .iter()
        .zip(&via_adapters)
        .map(|(b, want)| max_abs_diff(&merged.forward(b).unwrap(), want))
        .fold(0.0, f64::max);
    MergeCheck { init_diff, merge_diff }
}

pub fn alpaca_examples(tok: &Tokenizer, max_seq: usize) -> Vec<TrainExample> {
    load_sft(&data_dir().join("alpaca_toy.jsonl"), SftFormat::Alpaca, max_seq)
        .unwrap()
        .examples(tok)
        .unwrap()
}

pub struct FreezeCheck {
    /// Names of frozen tensors whose bits changed.
    pub changed_frozen: Vec<String>,
    /// Names of trainable tensors whose bits did not change.
    pub unchanged_trainable: Vec<String>,
    pub gradient_keys_match: bool,
    pub tied_rejected: bool,
}

/// Trains `lm-head+last-k` on a toy model and compares every tensor.
pub fn freeze_check(k: usize, seed: u64) -> FreezeCheck {
    let tok = Tokenizer::printable_ascii();
    let mut model = toy::<f32>(tok.vocab_size(), seed);
    let before = model.clone();
    let policy = FreezePolicy::LmHeadPlusLast(k);
    apply_freeze(&mut model, policy, false).unwrap();
    let examples: Vec<_> = alpaca_examples(&tok, 128).into_iter().take(24).collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        lr: 1e-3,
        warmup_steps: 0,
        seed,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &examples, &cfg).unwrap();
    let allowed: std::collections::BTreeSet<String> = policy.trainable_names(model.spec()).into_iter().collect();
    let mut changed_frozen = Vec::new();
    let mut unchanged_trainable = Vec::new();
    for ((name, a), (_, b)) in before.named_params().into_iter().zip(model.named_params()) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        match (allowed.contains(&name), same) {
            (false, false) => changed_frozen.push(name),
            (true, true) => unchanged_trainable.push(name),
            _ => {}
        }
    }
    let mut tied_spec = toy_spec(tok.vocab_size());
    tied_spec.tie_embeddings = true;
    let mut tied = TransformerModel::<f32>::new(tied_spec, seed).unwrap();
    let tied_rejected = matches!(
        apply_freeze(&mut tied, FreezePolicy::LmHeadOnly, false),
        Err(prunelab::Error::Policy(m)) if m.contains("tied")
    );
    FreezeCheck {
        changed_frozen,
        unchanged_trainable,
        gradient_keys_match: out.gradient_keys == allowed,
        tied_rejected,
    }
}

use prunelab::metrics::Metric;
use prunelab::pruning::{run_pipeline, CalibrationSource, PipelineConfig, PruningObjective};

pub struct Equivalence {
    pub metric: String,
    pub one_shot: Vec<usize>,
    pub iterative: Vec<usize>,
    /// Final models agree bit for bit.
    pub same_weights: bool,
}

/// One-shot versus iterative with `step == total`, no fine-tuning, for every
/// metric.
pub fn one_shot_vs_iterative(model: &TransformerModel<f32>, corpus: &TokenizedCorpus, total: usize) -> Vec<Equivalence> {
    let source = CalibrationSource::Corpus {
        corpus,
        count: 4,
        seq_len: 32,
        seed: 11,
        reuse: false,
    };
    Metric::all(5)
        .into_iter()
        .map(|metric| {
            let a = run_pipeline(model, &PipelineConfig::new(PruningObjective::one_shot(metric, total)), source, &[]);
            let b = run_pipeline(
                model,
                &PipelineConfig::new(PruningObjective::iterative(metric, total, total)),
                source,
                &[],
            );
            let (ma, mb) = (a.model.unwrap(), b.model.unwrap());
            let same_weights = ma
                .named_params()
                .into_iter()
                .zip(mb.named_params())
                .all(|((na, x), (nb, y))| na == nb && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
                && ma.num_layers() == mb.num_layers();
            Equivalence {
                metric: metric.name().into(),
                one_shot: a.record.removed(),
                iterative: b.record.removed(),
                same_weights,
            }
        })
        .collect()
}

use prunelab::numeric::Tensor;

/// Constant logits: every token equally likely.
pub struct Uniform {
    pub vocab: usize,
    pub max_seq: usize,
}

impl LanguageModel<f64> for Uniform {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn max_seq_len(&self) -> usize {
        self.max_seq
    }
    fn logits(&self, batch: &TokenBatch) -> prunelab::Result<Tensor<f64>> {
        Ok(Tensor::full([batch.batch(), batch.seq(), self.vocab], 0.25))
    }
}

/// Puts all mass on `(t + 1) mod vocab` after token `t`.
pub struct Successor {
    pub vocab: usize,
}

impl LanguageModel<f64> for Successor {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn max_seq_len(&self) -> usize {
        64
    }
    fn logits(&self, batch: &TokenBatch) -> prunelab::Result<Tensor<f64>> {
        let v = self.vocab;
        let mut out = vec![-1e4; batch.ids().len() * v];
        for (r, &t) in batch.ids().iter().enumerate() {
            out[r * v + (t as usize + 1) % v] = 1e4;
        }
        Tensor::new([batch.batch(), batch.seq(), v], out)
    }
}
