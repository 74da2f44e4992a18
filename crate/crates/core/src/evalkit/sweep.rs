use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{TokenizedCorpus, Tokenizer, TrainExample};
use crate::error::{Error, Result};
use crate::evalkit::{build_report, EvalSuite};
use crate::model::TransformerModel;
use crate::numeric::Real;
use crate::pruning::{run_pipeline, CalibrationSource, PipelineConfig};

/// The axis being varied, with its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "grid")]
pub enum SweepKind {
    /// Number of calibration sequences.
    CalibrationCount(Vec<usize>),
    /// Number of blocks removed.
    PruneRate(Vec<usize>),
    /// Name of the SFT dataset used for recovery.
    SftDataset(Vec<String>),
}

impl SweepKind {
    pub fn name(&self) -> &'static str {
        match self {
            SweepKind::CalibrationCount(_) => "calibration-count",
            SweepKind::PruneRate(_) => "prune-rate",
            SweepKind::SftDataset(_) => "sft-dataset",
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepKind::CalibrationCount(g) | SweepKind::PruneRate(g) => g.len(),
            SweepKind::SftDataset(g) => g.len(),
        }
    }

    fn label(&self, i: usize) -> String {
        match self {
            SweepKind::CalibrationCount(g) | SweepKind::PruneRate(g) => g[i].to_string(),
            SweepKind::SftDataset(g) => g[i].clone(),
        }
    }
}

/// Everything held fixed across a sweep.
pub struct SweepBase<'a, T: Real> {
    pub model: &'a TransformerModel<T>,
    pub tokenizer: &'a Tokenizer,
    pub pipeline: PipelineConfig,
    pub calibration_corpus: &'a TokenizedCorpus,
    pub calibration_count: usize,
    pub calibration_seq_len: usize,
    pub calibration_seed: u64,
    pub reuse_calibration: bool,
    /// Named SFT datasets; the first is used unless the sweep varies it.
    pub sft: Vec<(String, Vec<TrainExample>)>,
    pub suite: &'a EvalSuite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub removed: Vec<usize>,
    pub perplexity: BTreeMap<String, f64>,
    pub average_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: String,
    pub metric: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// `value,removed,ppl:<corpus>...,avg_acc,error`; removed indices are
    /// space-separated.
    pub fn to_csv(&self) -> Result<String> {
        let corpora: Vec<String> = self
            .points
            .iter()
            .find(|p| p.error.is_none())
            .map(|p| p.perplexity.keys().cloned().collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["value".to_string(), "removed".into()];
        header.extend(corpora.iter().map(|c| format!("ppl:{c}")));
        header.extend(["avg_acc".to_string(), "error".into()]);
        w.write_record(&header)?;
        for p in &self.points {
            let mut rec = vec![
                p.value.clone(),
                p.removed.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            ];
            rec.extend(
                corpora
                    .iter()
                    .map(|c| p.perplexity.get(c).map_or(String::new(), |v| format!("{v:.6}"))),
            );
            rec.push(p.average_accuracy.map_or(String::new(), |a| format!("{a:.6}")));
            rec.push(p.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes")
    }
}

/// Runs the pipeline and evaluation once per grid point. A failing point is
/// recorded with its error and the sweep moves on.
pub fn sensitivity_sweep<T: Real>(base: &SweepBase<'_, T>, kind: &SweepKind) -> Result<SweepReport> {
    if kind.len() == 0 {
        return Err(Error::config("grid", "sweep grid is empty"));
    }
    let mut points = Vec::with_capacity(kind.len());
    for i in 0..kind.len() {
        let value = kind.label(i);
        log::info!("sweep {} = {value}", kind.name());
        let point = run_point(base, kind, i).unwrap_or_else(|e| SweepPoint {
            value: value.clone(),
            removed: Vec::new(),
            perplexity: BTreeMap::new(),
            average_accuracy: None,
            error: Some(e.to_string()),
        });
        points.push(point);
    }
    Ok(SweepReport {
        kind: kind.name().into(),
        metric: base.pipeline.objective.metric.name().into(),
        points,
    })
}

fn run_point<T: Real>(base: &SweepBase<'_, T>, kind: &SweepKind, i: usize) -> Result<SweepPoint> {
    let mut config = base.pipeline.clone();
    let mut count = base.calibration_count;
    let mut sft_index = 0;
    match kind {
        SweepKind::CalibrationCount(g) => count = g[i],
        SweepKind::PruneRate(g) => config.objective.total = g[i],
        SweepKind::SftDataset(g) => {
            sft_index = base
                .sft
                .iter()
                .position(|(n, _)| *n == g[i])
                .ok_or_else(|| Error::config("grid", format!("no SFT dataset named `{}`", g[i])))?;
        }
    }
    if let crate::pruning::Strategy::Iterative { step } = &mut config.objective.strategy {
        *step = (*step).min(config.objective.total.max(1));
    }
    let sft: &[TrainExample] = base.sft.get(sft_index).map_or(&[], |(_, ex)| ex.as_slice());
    let source = CalibrationSource::Corpus {
        corpus: base.calibration_corpus,
        count,
        seq_len: base.calibration_seq_len,
        seed: base.calibration_seed,
        reuse: base.reuse_calibration,
    };
    let outcome = run_pipeline(base.model, &config, source, sft);
    let removed = outcome.record.removed();
    let model = outcome.model?;
    let report = build_report(&model, base.tokenizer, base.suite, kind.label(i))?;
    Ok(SweepPoint {
        value: kind.label(i),
        removed,
        perplexity: report.perplexity,
        average_accuracy: report.average_accuracy,
        error: None,
    })
}
