use std::collections::BTreeMap;

use crate::data::TokenizedCorpus;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, TokenBatch};
use crate::numeric::{kernels, Real};

/// Rows per forward pass when scoring many sequences.
const ROWS_PER_PASS: usize = 32;

/// Summed next-token negative log-likelihood over every position of every
/// sequence after the first, and the number of positions scored.
pub fn nll_sum<T: Real, M: LanguageModel<T> + ?Sized>(model: &M, sequences: &[Vec<u32>]) -> Result<(f64, usize)> {
    let mut groups: BTreeMap<usize, Vec<&[u32]>> = BTreeMap::new();
    for s in sequences.iter().filter(|s| s.len() >= 2) {
        groups.entry(s.len()).or_default().push(s);
    }
    let vocab = model.vocab_size();
    let (mut total, mut count) = (0.0f64, 0usize);
    for rows in groups.values() {
        for chunk in rows.chunks(ROWS_PER_PASS) {
            let batch = TokenBatch::from_rows(chunk)?;
            let logits = model.logits(&batch)?;
            let seq = batch.seq();
            for (b, row) in chunk.iter().enumerate() {
                for p in 0..seq - 1 {
                    let off = (b * seq + p) * vocab;
                    let l = &logits.data()[off..off + vocab];
                    let lse = kernels::log_sum_exp(l).as_f64();
                    total += lse - l[row[p + 1] as usize].as_f64();
                    count += 1;
                }
            }
        }
    }
    Ok((total, count))
}

/// `exp(mean NLL)` over the given sequences.
pub fn sequence_perplexity<T: Real, M: LanguageModel<T> + ?Sized>(model: &M, sequences: &[Vec<u32>]) -> Result<f64> {
    let (total, count) = nll_sum(model, sequences)?;
    if count == 0 {
        return Err(Error::Data("nothing to score: every sequence is shorter than 2 tokens".into()));
    }
    Ok((total / count as f64).exp())
}

/// Perplexity over non-overlapping windows of `window` tokens (the model's
/// maximum when `None`) cut inside each document, so no window spans a
/// document boundary.
pub fn perplexity<T: Real, M: LanguageModel<T> + ?Sized>(
    model: &M,
    corpus: &TokenizedCorpus,
    window: Option<usize>,
) -> Result<f64> {
    let window = window.unwrap_or(model.max_seq_len()).min(model.max_seq_len());
    if window < 2 {
        return Err(Error::Data(format!("perplexity window {window} is shorter than 2")));
    }
    let chunks = corpus.chunks(window);
    if chunks.is_empty() {
        return Err(Error::Data(format!("corpus `{}` is empty", corpus.name)));
    }
    sequence_perplexity(model, &chunks)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numeric::Tensor;

    /// Every logit equal.
    pub(crate) struct Uniform(pub usize);

    impl LanguageModel<f64> for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn max_seq_len(&self) -> usize {
            64
        }
        fn logits(&self, batch: &TokenBatch) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros([batch.batch(), batch.seq(), self.0]))
        }
    }

    /// Puts all mass on `(token + 1) % vocab`.
    struct Successor(usize);

    impl LanguageModel<f64> for Successor {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn max_seq_len(&self) -> usize {
            64
        }
        fn logits(&self, batch: &TokenBatch) -> Result<Tensor<f64>> {
            let v = self.0;
            let mut data = vec![-1e9; batch.ids().len() * v];
            for (i, &t) in batch.ids().iter().enumerate() {
                data[i * v + (t as usize + 1) % v] = 0.0;
            }
            Tensor::new([batch.batch(), batch.seq(), v], data)
        }
    }

    fn corpus(docs: Vec<Vec<u32>>) -> TokenizedCorpus {
        TokenizedCorpus {
            name: "c".into(),
            documents: docs,
        }
    }

    #[test]
    fn uniform_is_vocab_size() {
        let c = corpus(vec![vec![1, 4, 9, 16, 3, 2, 0], vec![5, 6, 7]]);
        let p = perplexity(&Uniform(17), &c, None).unwrap();
        assert!((p - 17.0).abs() < 1e-6);
    }

    #[test]
    fn oracle_is_one() {
        let c = corpus(vec![(0..30).map(|i| i % 5).collect()]);
        let p = perplexity(&Successor(5), &c, Some(8)).unwrap();
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(perplexity(&Uniform(4), &corpus(vec![vec![3]]), None).is_err());
    }
}
