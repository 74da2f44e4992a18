use serde::{Deserialize, Serialize};

use crate::data::{EvalTask, Tokenizer, BOS, PAD};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, TokenBatch};
use crate::numeric::{kernels, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChoiceNormalization {
    /// Summed log-likelihood of the choice tokens.
    #[default]
    Sum,
    /// Summed log-likelihood divided by the choice's token count.
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScore {
    pub item: usize,
    /// Summed log-likelihood per choice, before normalization.
    pub loglik: Vec<f64>,
    pub normalization: ChoiceNormalization,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub stderr: f64,
    pub scores: Vec<ChoiceScore>,
}

/// `sqrt(p(1-p)/n)`
pub fn binomial_stderr(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Scores each choice as a continuation of `<bos> context`; the context is
/// cut from the left when the whole sequence would exceed the model window.
pub fn zero_shot_eval<T: Real, M: LanguageModel<T> + ?Sized>(
    model: &M,
    tok: &Tokenizer,
    task: &EvalTask,
    normalization: ChoiceNormalization,
) -> Result<TaskResult> {
    let max = model.max_seq_len();
    let vocab = model.vocab_size();
    let mut scores = Vec::with_capacity(task.len());
    let mut correct = 0;
    for (idx, item) in task.items.iter().enumerate() {
        let context = tok.encode(&item.context)?;
        let mut rows = Vec::with_capacity(item.choices.len());
        let mut spans = Vec::with_capacity(item.choices.len());
        for (c, choice) in item.choices.iter().enumerate() {
            let cont = tok.encode(choice)?;
            if cont.is_empty() {
                return Err(Error::Data(format!(
                    "task `{}` item {}: choice {c} tokenizes to nothing",
                    task.name,
                    idx + 1
                )));
            }
            if cont.len() + 1 > max {
                return Err(Error::SequenceTooLong {
                    len: cont.len() + 1,
                    max,
                });
            }
            let keep = (max - 1 - cont.len()).min(context.len());
            let mut row = Vec::with_capacity(1 + keep + cont.len());
            row.push(BOS);
            row.extend_from_slice(&context[context.len() - keep..]);
            let start = row.len();
            row.extend_from_slice(&cont);
            spans.push((start, row.len()));
            rows.push(row);
        }
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        for r in &mut rows {
            r.resize(width, PAD);
        }
        let batch = TokenBatch::from_rows(&rows)?;
        let logits = model.logits(&batch)?;
        let loglik: Vec<f64> = rows
            .iter()
            .zip(&spans)
            .enumerate()
            .map(|(b, (row, &(start, end)))| {
                (start..end)
                    .map(|p| {
                        let off = (b * width + p - 1) * vocab;
                        let l = &logits.data()[off..off + vocab];
                        l[row[p] as usize].as_f64() - kernels::log_sum_exp(l).as_f64()
                    })
                    .sum()
            })
            .collect();
        let normed: Vec<f64> = loglik
            .iter()
            .zip(&spans)
            .map(|(&ll, &(s, e))| match normalization {
                ChoiceNormalization::Sum => ll,
                ChoiceNormalization::PerToken => ll / (e - s) as f64,
            })
            .collect();
        let mut predicted = 0;
        for (i, &v) in normed.iter().enumerate() {
            if v > normed[predicted] {
                predicted = i;
            }
        }
        if predicted == item.answer {
            correct += 1;
        }
        scores.push(ChoiceScore {
            item: idx,
            loglik,
            normalization,
            predicted,
        });
    }
    let n = task.len();
    let accuracy = correct as f64 / n as f64;
    Ok(TaskResult {
        task: task.name.clone(),
        n,
        correct,
        accuracy,
        stderr: binomial_stderr(accuracy, n),
        scores,
    })
}
