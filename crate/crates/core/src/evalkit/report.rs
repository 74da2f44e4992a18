use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{EvalTask, TokenizedCorpus, Tokenizer};
use crate::error::{Error, Result};
use crate::evalkit::{perplexity, zero_shot_eval, ChoiceNormalization};
use crate::model::{hex16, TransformerModel, TransformerSpec};
use crate::numeric::Real;

/// Sequence length at which MACs and memory are reported.
pub const REPORT_SEQ: usize = 64;

/// Corpora for perplexity and tasks for accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSuite {
    pub corpora: Vec<TokenizedCorpus>,
    pub tasks: Vec<EvalTask>,
    pub normalization: ChoiceNormalization,
    /// Perplexity window; the model maximum when `None`.
    pub window: Option<usize>,
}

impl EvalSuite {
    pub fn is_empty(&self) -> bool {
        self.corpora.is_empty() && self.tasks.is_empty()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.corpora {
            h.update(c.name.as_bytes());
            h.update(c.fingerprint().as_bytes());
        }
        for t in &self.tasks {
            h.update(t.name.as_bytes());
            h.update(serde_json::to_vec(&t.items).expect("items serialize"));
        }
        hex16(&h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: String,
    pub n: usize,
    pub accuracy: f64,
    pub stderr: f64,
}

/// Outcome of checking a report against a baseline with a tolerated
/// relative drop `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaFlag {
    pub alpha: f64,
    pub baseline: f64,
    pub value: f64,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub model_fingerprint: String,
    pub suite_fingerprint: String,
    pub layers: usize,
    pub perplexity: BTreeMap<String, f64>,
    pub tasks: Vec<TaskAccuracy>,
    /// Unweighted mean of the task accuracies.
    pub average_accuracy: Option<f64>,
    pub params: u64,
    pub macs: u64,
    pub memory_bytes: u64,
    /// Wall-clock seconds spent evaluating.
    pub latency_secs: f64,
    #[serde(default)]
    pub alpha: Option<AlphaFlag>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Copy with the timing field zeroed, for comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            latency_secs: 0.0,
            ..self.clone()
        }
    }

    /// Flags whether the average accuracy stays within `(1 − alpha)` of the
    /// baseline's. Informational only.
    pub fn flag_alpha(&mut self, baseline: &EvalReport, alpha: f64) {
        if let (Some(b), Some(v)) = (baseline.average_accuracy, self.average_accuracy) {
            self.alpha = Some(AlphaFlag {
                alpha,
                baseline: b,
                value: v,
                within: v >= (1.0 - alpha) * b,
            });
        }
    }

    pub fn table(&self) -> String {
        render_table(std::slice::from_ref(self))
    }
}

/// Parameter bytes plus the largest set of live activations during one
/// forward pass over `seq` tokens at batch 1: the residual stream and its
/// normalized copy, q/k/v, one head's full score matrix per head, the three
/// feed-forward intermediates and the logits.
pub fn memory_estimate(spec: &TransformerSpec, seq: usize, bytes_per_scalar: usize) -> u64 {
    let params = spec.count_params().unique;
    let s = seq as u64;
    let per_token =
        2 * spec.hidden as u64 + spec.q_dim() as u64 + 2 * spec.kv_dim() as u64 + 3 * spec.ffn_hidden as u64;
    let scores = spec.heads as u64 * s * s;
    let logits = s * spec.vocab_size as u64;
    (params + s * per_token + scores + logits) * bytes_per_scalar as u64
}

/// Runs every corpus and task of `suite` against `model`.
pub fn build_report<T: Real>(
    model: &TransformerModel<T>,
    tok: &Tokenizer,
    suite: &EvalSuite,
    label: impl Into<String>,
) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(Error::Data("evaluation suite is empty".into()));
    }
    let start = Instant::now();
    let mut ppl = BTreeMap::new();
    for c in &suite.corpora {
        ppl.insert(c.name.clone(), perplexity(model, c, suite.window)?);
    }
    let mut tasks = Vec::new();
    for t in &suite.tasks {
        let r = zero_shot_eval(model, tok, t, suite.normalization)?;
        tasks.push(TaskAccuracy {
            task: r.task,
            n: r.n,
            accuracy: r.accuracy,
            stderr: r.stderr,
        });
    }
    let average_accuracy =
        (!tasks.is_empty()).then(|| tasks.iter().map(|t| t.accuracy).sum::<f64>() / tasks.len() as f64);
    let spec = model.spec();
    Ok(EvalReport {
        label: label.into(),
        model_fingerprint: model.fingerprint(),
        suite_fingerprint: suite.fingerprint(),
        layers: model.num_layers(),
        perplexity: ppl,
        tasks,
        average_accuracy,
        params: spec.count_params().unique,
        macs: spec.count_macs(REPORT_SEQ),
        memory_bytes: memory_estimate(spec, REPORT_SEQ, T::DTYPE.size_bytes()),
        latency_secs: start.elapsed().as_secs_f64(),
        alpha: None,
    })
}

fn columns(r: &EvalReport) -> (Vec<String>, Vec<String>) {
    (
        r.perplexity.keys().cloned().collect(),
        r.tasks.iter().map(|t| t.task.clone()).collect(),
    )
}

/// One row per report; the best value in each metric column carries a `*`
/// (lowest perplexity, highest accuracy). Reports must share corpora and
/// tasks.
pub fn merge_reports(reports: &[EvalReport]) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Incompatible("no reports to merge".into()))?;
    let cols = columns(first);
    for r in &reports[1..] {
        if columns(r) != cols {
            return Err(Error::Incompatible(format!(
                "`{}` evaluates {:?} but `{}` evaluates {:?}",
                first.label,
                cols,
                r.label,
                columns(r)
            )));
        }
    }
    Ok(render_table(reports))
}

fn fmt_count(v: u64) -> String {
    match v {
        v if v >= 1_000_000_000 => format!("{:.2}B", v as f64 / 1e9),
        v if v >= 1_000_000 => format!("{:.2}M", v as f64 / 1e6),
        v if v >= 1_000 => format!("{:.2}K", v as f64 / 1e3),
        v => v.to_string(),
    }
}

fn render_table(reports: &[EvalReport]) -> String {
    let (ppl_cols, task_cols) = reports.first().map(columns).unwrap_or_default();
    let mut header = vec!["model".to_string(), "layers".into(), "params".into(), "MACs".into()];
    header.extend(ppl_cols.iter().map(|c| format!("ppl:{c}")));
    header.extend(task_cols.iter().cloned());
    header.push("avg".into());

    let best_ppl: Vec<f64> = ppl_cols
        .iter()
        .map(|c| reports.iter().map(|r| r.perplexity[c]).fold(f64::INFINITY, f64::min))
        .collect();
    let best_task: Vec<f64> = (0..task_cols.len())
        .map(|i| reports.iter().map(|r| r.tasks[i].accuracy).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let best_avg = reports
        .iter()
        .filter_map(|r| r.average_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let mark = |v: f64, best: f64, multi: bool| if multi && v == best { "*" } else { "" };
    let multi = reports.len() > 1;

    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![
            r.label.clone(),
            r.layers.to_string(),
            fmt_count(r.params),
            fmt_count(r.macs),
        ];
        for (c, &b) in ppl_cols.iter().zip(&best_ppl) {
            let v = r.perplexity[c];
            row.push(format!("{v:.3}{}", mark(v, b, multi)));
        }
        for (t, &b) in r.tasks.iter().zip(&best_task) {
            row.push(format!("{:.4}±{:.3}{}", t.accuracy, t.stderr, mark(t.accuracy, b, multi)));
        }
        row.push(match r.average_accuracy {
            Some(a) => format!("{a:.4}{}", mark(a, best_avg, multi)),
            None => "-".into(),
        });
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(label: &str, acc: &[f64], tasks: &[&str]) -> EvalReport {
        let t: Vec<TaskAccuracy> = tasks
            .iter()
            .zip(acc)
            .map(|(n, &a)| TaskAccuracy {
                task: n.to_string(),
                n: 100,
                accuracy: a,
                stderr: 0.0,
            })
            .collect();
        EvalReport {
            label: label.into(),
            model_fingerprint: "f".into(),
            suite_fingerprint: "s".into(),
            layers: 6,
            perplexity: BTreeMap::from([("wiki".to_string(), 10.0)]),
            average_accuracy: Some(acc.iter().sum::<f64>() / acc.len() as f64),
            tasks: t,
            params: 1000,
            macs: 5000,
            memory_bytes: 1,
            latency_secs: 0.1,
            alpha: None,
        }
    }

    #[test]
    fn average_is_plain_mean() {
        assert!((report("a", &[0.5, 0.7], &["x", "y"]).average_accuracy.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn single_run_single_row() {
        let t = merge_reports(&[report("a", &[0.5], &["x"])]).unwrap();
        assert_eq!(t.lines().count(), 3);
        assert!(!t.contains('*'));
    }

    #[test]
    fn best_cells_marked() {
        let t = merge_reports(&[report("a", &[0.5], &["x"]), report("b", &[0.7], &["x"])]).unwrap();
        let b_row = t.lines().find(|l| l.starts_with('b')).unwrap();
        assert!(b_row.contains("0.7000±0.000*"));
    }

    #[test]
    fn disjoint_suites_refuse() {
        let e = merge_reports(&[report("a", &[0.5], &["x"]), report("b", &[0.5], &["y"])]).unwrap_err();
        assert!(matches!(e, Error::Incompatible(_)));
    }

    #[test]
    fn alpha_flag() {
        let base = report("base", &[0.8], &["x"]);
        let mut r = report("p", &[0.7], &["x"]);
        r.flag_alpha(&base, 0.1);
        assert!(!r.alpha.as_ref().unwrap().within);
        r.flag_alpha(&base, 0.2);
        assert!(r.alpha.unwrap().within);
    }
}
