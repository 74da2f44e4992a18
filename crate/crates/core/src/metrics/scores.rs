use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::CalibrationFingerprint;
use crate::error::{Error, Result};

/// Layer-selection metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Metric {
    ReverseOrder,
    Random { seed: u64 },
    MagnitudeL1,
    MagnitudeL2,
    Taylor,
    Ppl,
    #[serde(rename = "bi")]
    BlockInfluence,
}

impl Metric {
    /// The seven metrics, with `seed` for the random baseline.
    pub fn all(seed: u64) -> [Metric; 7] {
        [
            Metric::ReverseOrder,
            Metric::Random { seed },
            Metric::MagnitudeL1,
            Metric::MagnitudeL2,
            Metric::Taylor,
            Metric::Ppl,
            Metric::BlockInfluence,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::ReverseOrder => "reverse-order",
            Metric::Random { .. } => "random",
            Metric::MagnitudeL1 => "magnitude-l1",
            Metric::MagnitudeL2 => "magnitude-l2",
            Metric::Taylor => "taylor",
            Metric::Ppl => "ppl",
            Metric::BlockInfluence => "bi",
        }
    }

    /// Parses a metric name; `random` takes `seed`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "reverse-order" | "reverse" => Metric::ReverseOrder,
            "random" => Metric::Random { seed },
            "magnitude-l1" | "l1" => Metric::MagnitudeL1,
            "magnitude-l2" | "l2" => Metric::MagnitudeL2,
            "taylor" => Metric::Taylor,
            "ppl" | "perplexity" => Metric::Ppl,
            "bi" | "block-influence" => Metric::BlockInfluence,
            other => return Err(Error::config("metric", format!("unknown metric `{other}`"))),
        })
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(self, Metric::Taylor | Metric::Ppl | Metric::BlockInfluence)
    }

    /// Metrics whose scores depend only on layer positions.
    pub fn is_positional(&self) -> bool {
        matches!(self, Metric::ReverseOrder | Metric::Random { .. })
    }

    pub fn orientation(&self) -> Orientation {
        match self {
            Metric::ReverseOrder | Metric::Random { .. } => Orientation::Positional,
            Metric::Ppl => Orientation::SmallestDegradation,
            _ => Orientation::PruneLowest,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a score maps to pruning priority. Every orientation prunes the
/// smallest score first; the flag records what the score means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Low importance value ⇒ prune first (magnitude, Taylor, BI).
    PruneLowest,
    /// Score is the perplexity after removing the layer; low ⇒ small damage.
    SmallestDegradation,
    /// Score is a position in a fixed order (reverse-order, random).
    Positional,
}

/// Per-layer importance values from one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreSet {
    pub metric: Metric,
    pub scores: Vec<f64>,
    pub orientation: Orientation,
    #[serde(default)]
    pub calibration: Option<CalibrationFingerprint>,
    #[serde(default)]
    pub model_fingerprint: Option<String>,
    /// Unpruned-model perplexity, recorded by the PPL metric.
    #[serde(default)]
    pub baseline: Option<f64>,
}

impl LayerScoreSet {
    pub fn new(metric: Metric, scores: Vec<f64>) -> Self {
        Self {
            metric,
            orientation: metric.orientation(),
            scores,
            calibration: None,
            model_fingerprint: None,
            baseline: None,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.scores.len()
    }

    /// All layers, first-to-prune first: ascending score, ties to the lower
    /// index.
    pub fn prune_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]).then(a.cmp(&b)));
        idx
    }

    /// The `k` layers to remove, ascending by index.
    pub fn bottom_k(&self, k: usize) -> Result<Vec<usize>> {
        if k >= self.scores.len() {
            return Err(Error::InvalidLayers(format!(
                "cannot select {k} of {} layers",
                self.scores.len()
            )));
        }
        let mut out: Vec<usize> = self.prune_order().into_iter().take(k).collect();
        out.sort_unstable();
        Ok(out)
    }

    /// Rank of each layer in prune order (0 = pruned first).
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.scores.len()];
        for (r, i) in self.prune_order().into_iter().enumerate() {
            ranks[i] = r;
        }
        ranks
    }

    /// `layer,score,rank`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "score", "rank"])?;
        for (i, (s, r)) in self.scores.iter().zip(self.ranks()).enumerate() {
            w.write_record([i.to_string(), format!("{s:.10e}"), r.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scores serialize")
    }
}
