use rayon::prelude::*;

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::evalkit::sequence_perplexity;
use crate::metrics::{LayerScoreSet, Metric};
use crate::model::{Binding, MatrixRole, TokenBatch, TransformerModel};
use crate::numeric::{Graph, Real, SeededRng, Tensor};

/// Layer `i` scores `n − 1 − i`, so the deepest layers go first.
pub fn reverse_order_scores(n: usize) -> LayerScoreSet {
    let scores = (0..n).map(|i| (n - 1 - i) as f64).collect();
    LayerScoreSet::new(Metric::ReverseOrder, scores)
}

/// Each layer's score is its position in a seeded permutation.
pub fn random_scores(n: usize, seed: u64) -> LayerScoreSet {
    let perm = SeededRng::new(seed).permutation(n);
    let mut scores = vec![0.0; n];
    for (rank, &layer) in perm.iter().enumerate() {
        scores[layer] = rank as f64;
    }
    LayerScoreSet::new(Metric::Random { seed }, scores)
}

/// Sum over a block's seven matrices of each matrix's entrywise p-norm.
pub fn magnitude_scores<T: Real>(model: &TransformerModel<T>, p: u8) -> Result<LayerScoreSet> {
    let metric = match p {
        1 => Metric::MagnitudeL1,
        2 => Metric::MagnitudeL2,
        _ => return Err(Error::config("p", format!("magnitude norm must be 1 or 2, got {p}"))),
    };
    let scores = model
        .layers()
        .iter()
        .map(|l| {
            l.matrices()
                .map(|(_, w)| if p == 1 { w.norm_l1() } else { w.norm_l2() })
                .sum()
        })
        .collect();
    Ok(with_model(LayerScoreSet::new(metric, scores), model))
}

fn with_model<T: Real>(mut s: LayerScoreSet, model: &TransformerModel<T>) -> LayerScoreSet {
    s.model_fingerprint = Some(model.fingerprint());
    s
}

fn with_calibration<T: Real>(s: LayerScoreSet, model: &TransformerModel<T>, calib: &CalibrationSet) -> LayerScoreSet {
    let mut s = with_model(s, model);
    s.calibration = Some(calib.fingerprint());
    s
}

/// Inputs `seq[..len-1]` and targets `seq[1..]` for each equal-length group.
fn shifted_batches(calib: &CalibrationSet) -> Result<Vec<(TokenBatch, Vec<u32>)>> {
    calib
        .batches()
        .into_iter()
        .map(|b| {
            let s = b.seq();
            let mut ids = Vec::with_capacity(b.batch() * (s - 1));
            let mut targets = Vec::with_capacity(b.batch() * (s - 1));
            for r in 0..b.batch() {
                let row = b.row(r);
                ids.extend_from_slice(&row[..s - 1]);
                targets.extend_from_slice(&row[1..]);
            }
            Ok((TokenBatch::new(b.batch(), s - 1, ids)?, targets))
        })
        .collect()
}

/// Per block, `Σ_k Σ |∂L/∂W_k ⊙ W_k|` over its seven matrices, where `L` is
/// the mean next-token loss over every calibration position, taken in one
/// accumulated backward pass.
pub fn taylor_scores<T: Real>(model: &TransformerModel<T>, calib: &CalibrationSet) -> Result<LayerScoreSet> {
    let mut m = model.clone();
    m.set_all_trainable(false);
    for i in 0..m.num_layers() {
        for r in MatrixRole::ALL {
            m.layer_mut(i).matrix_mut(r).set_requires_grad(true);
        }
    }
    let batches = shifted_batches(calib)?;
    let total: usize = batches.iter().map(|(_, t)| t.len()).sum();
    let w = 1.0 / total as f64;
    let mut g = Graph::new();
    let mut loss = None;
    for (batch, targets) in &batches {
        let tr = m.trace(&mut g, batch, None, None, Binding::Training, false)?;
        let part = g.cross_entropy(tr.logits, targets, &vec![w; targets.len()])?;
        loss = Some(match loss {
            None => part,
            Some(acc) => g.add(acc, part)?,
        });
    }
    let loss = loss.ok_or_else(|| Error::Data("calibration set is empty".into()))?;
    let grads = g.backward(loss)?;
    let scores = (0..m.num_layers())
        .map(|i| {
            MatrixRole::ALL
                .iter()
                .map(|&r| {
                    let name = format!("layers.{i}.{}", r.field());
                    let wt = m.layer(i).matrix(r);
                    grads.get(&name).map_or(0.0, |gr| {
                        gr.data()
                            .iter()
                            .zip(wt.data())
                            .map(|(&a, &b)| (a.as_f64() * b.as_f64()).abs())
                            .sum::<f64>()
                    })
                })
                .sum()
        })
        .collect();
    Ok(with_calibration(LayerScoreSet::new(Metric::Taylor, scores), model, calib))
}

/// Cosine of two rows in f64; `None` when either has zero norm.
fn cosine<T: Real>(a: &[T], b: &[T]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na.sqrt() * nb.sqrt()))
}

/// Mean row-wise cosine between two `[rows, hidden]` streams gathered over
/// several batches; zero-norm rows are skipped.
fn mean_cosine<T: Real>(hidden: &[Vec<Tensor<T>>], i: usize, j: usize) -> Result<f64> {
    let (mut sum, mut n, mut skipped) = (0.0f64, 0usize, 0usize);
    for states in hidden {
        let (a, b) = (&states[i], &states[j]);
        for r in 0..a.rows() {
            match cosine(a.row(r), b.row(r)) {
                Some(c) => {
                    sum += c;
                    n += 1;
                }
                None => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} zero-norm hidden rows comparing streams {i} and {j}");
    }
    if n == 0 {
        return Err(Error::Data(format!(
            "every hidden row comparing streams {i} and {j} has zero norm"
        )));
    }
    Ok(sum / n as f64)
}

/// Block influence from captured streams: `hidden[b]` holds the `n + 1`
/// residual streams of batch `b` (input to every block, then the output of
/// the last). `BI_i = 1 − mean cos(X_i, X_{i+1})`.
pub fn block_influence<T: Real>(hidden: &[Vec<Tensor<T>>]) -> Result<Vec<f64>> {
    let streams = hidden.first().map_or(0, Vec::len);
    if streams < 2 || hidden.iter().any(|h| h.len() != streams) {
        return Err(Error::Data("hidden-state capture needs n + 1 streams per batch".into()));
    }
    (0..streams - 1).map(|i| Ok(1.0 - mean_cosine(hidden, i, i + 1)?)).collect()
}

fn capture<T: Real>(model: &TransformerModel<T>, calib: &CalibrationSet) -> Result<Vec<Vec<Tensor<T>>>> {
    calib
        .batches()
        .iter()
        .map(|b| Ok(model.forward_hidden(b)?.hidden))
        .collect()
}

/// Block influence over the calibration set; the last stream is taken
/// before the final norm.
pub fn bi_scores<T: Real>(model: &TransformerModel<T>, calib: &CalibrationSet) -> Result<LayerScoreSet> {
    let scores = block_influence(&capture(model, calib)?)?;
    Ok(with_calibration(
        LayerScoreSet::new(Metric::BlockInfluence, scores),
        model,
        calib,
    ))
}

/// Score of layer `i` is the calibration perplexity of the model without
/// block `i`. The unpruned perplexity is kept as the baseline.
pub fn ppl_scores<T: Real>(model: &TransformerModel<T>, calib: &CalibrationSet) -> Result<LayerScoreSet> {
    let n = model.num_layers();
    if n < 2 {
        return Err(Error::InvalidLayers("PPL scoring needs at least 2 layers".into()));
    }
    let baseline = sequence_perplexity(model, &calib.sequences)?;
    let scores = (0..n)
        .into_par_iter()
        .map(|i| sequence_perplexity(&model.remove_layers(&[i])?, &calib.sequences))
        .collect::<Result<Vec<f64>>>()?;
    let mut s = with_calibration(LayerScoreSet::new(Metric::Ppl, scores), model, calib);
    s.baseline = Some(baseline);
    Ok(s)
}

/// Dispatches on `metric`; data-driven metrics require `calib`.
pub fn score_layers<T: Real>(
    model: &TransformerModel<T>,
    metric: Metric,
    calib: Option<&CalibrationSet>,
) -> Result<LayerScoreSet> {
    let need = || calib.ok_or_else(|| Error::config("calibration", format!("metric `{metric}` needs calibration data")));
    let n = model.num_layers();
    match metric {
        Metric::ReverseOrder => Ok(reverse_order_scores(n)),
        Metric::Random { seed } => Ok(random_scores(n, seed)),
        Metric::MagnitudeL1 => magnitude_scores(model, 1),
        Metric::MagnitudeL2 => magnitude_scores(model, 2),
        Metric::Taylor => taylor_scores(model, need()?),
        Metric::Ppl => ppl_scores(model, need()?),
        Metric::BlockInfluence => bi_scores(model, need()?),
    }
}

/// `n × n` matrix of mean cosine similarity between the streams entering
/// blocks `i` and `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer".to_string()];
        header.extend((0..self.n).map(|j| j.to_string()));
        w.write_record(&header)?;
        for i in 0..self.n {
            let mut rec = vec![i.to_string()];
            rec.extend((0..self.n).map(|j| format!("{:.8}", self.get(i, j))));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

pub fn similarity_from_hidden<T: Real>(hidden: &[Vec<Tensor<T>>], n: usize) -> Result<SimilarityMatrix> {
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let c = mean_cosine(hidden, i, j)?;
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// Similarity of the streams entering each block, so entry `(i, i+1)` is
/// `1 − BI_i`.
pub fn layer_similarity<T: Real>(model: &TransformerModel<T>, calib: &CalibrationSet) -> Result<SimilarityMatrix> {
    let hidden = capture(model, calib)?;
    similarity_from_hidden(&hidden, model.num_layers())
}
