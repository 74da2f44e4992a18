use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::CalibrationFingerprint;
use crate::error::{Error, Result};
use crate::metrics::{LayerScoreSet, Metric};
use crate::model::TransformerModel;
use crate::numeric::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Strategy {
    OneShot,
    Iterative { step: usize },
}

impl Strategy {
    pub fn step(&self, total: usize) -> usize {
        match self {
            Strategy::OneShot => total,
            Strategy::Iterative { step } => *step,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::OneShot => f.write_str("one-shot"),
            Strategy::Iterative { step } => write!(f, "iterative(step={step})"),
        }
    }
}

/// What to remove and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningObjective {
    pub metric: Metric,
    /// Blocks to remove in total.
    pub total: usize,
    pub strategy: Strategy,
    /// Accepted relative degradation. Reported against, never enforced.
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl PruningObjective {
    pub fn one_shot(metric: Metric, total: usize) -> Self {
        Self {
            metric,
            total,
            strategy: Strategy::OneShot,
            alpha: None,
        }
    }

    pub fn iterative(metric: Metric, step: usize, total: usize) -> Self {
        Self {
            metric,
            total,
            strategy: Strategy::Iterative { step },
            alpha: None,
        }
    }

    /// `a:b:c` schedule shorthand: `b` is the step, `c` the total, `a` is
    /// accepted and ignored.
    pub fn parse_schedule(s: &str) -> Result<(usize, usize)> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::Schedule(format!("`{s}` is not of the form a:step:total"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums = parts
            .iter()
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        Ok((nums[1], nums[2]))
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.total == 0 || self.total >= layers {
            return Err(Error::Schedule(format!(
                "total {} must satisfy 0 < total < {layers} layers",
                self.total
            )));
        }
        let step = self.strategy.step(self.total);
        if step == 0 || step > self.total {
            return Err(Error::Schedule(format!(
                "step {step} must satisfy 1 ≤ step ≤ total {}",
                self.total
            )));
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::Schedule(format!("alpha must be a non-negative number, got {a}")));
            }
        }
        Ok(())
    }

    /// Sizes of the successive rounds; the last may be smaller.
    pub fn round_sizes(&self) -> Vec<usize> {
        let step = self.strategy.step(self.total).max(1);
        let mut left = self.total;
        let mut out = Vec::new();
        while left > 0 {
            let s = step.min(left);
            out.push(s);
            left -= s;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFingerprint {
    pub model: Option<String>,
    pub calibration: Option<CalibrationFingerprint>,
}

/// Removal rounds in original-model indexing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub rounds: Vec<Vec<usize>>,
    pub metric: String,
    pub fingerprints: Vec<PlanFingerprint>,
    pub num_layers: usize,
}

impl PruningPlan {
    pub fn removed(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.rounds.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    /// Rounds disjoint, indices in range, and at least one layer survives.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in self.rounds.iter().flatten() {
            if i >= self.num_layers {
                return Err(Error::InvalidLayers(format!("index {i} out of range for {} layers", self.num_layers)));
            }
            if !seen.insert(i) {
                return Err(Error::InvalidLayers(format!("index {i} removed twice")));
            }
        }
        if seen.len() >= self.num_layers {
            return Err(Error::InvalidLayers("plan removes every layer".into()));
        }
        Ok(())
    }

    /// Executes the rounds in order, relabelling each against the removals
    /// before it.
    pub fn apply<T: Real>(&self, model: &TransformerModel<T>) -> Result<TransformerModel<T>> {
        self.validate()?;
        if model.num_layers() != self.num_layers {
            return Err(Error::InvalidLayers(format!(
                "plan is for {} layers, model has {}",
                self.num_layers,
                model.num_layers()
            )));
        }
        let mut prior = Vec::new();
        let mut current = model.clone();
        for round in &self.rounds {
            let local = relabel_indices(round, &prior, self.num_layers)?;
            current = current.remove_layers(&local)?;
            prior.extend_from_slice(round);
        }
        Ok(current)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Single-round plan removing the bottom `k` layers of `scores`.
pub fn make_plan(scores: &LayerScoreSet, k: usize) -> Result<PruningPlan> {
    let removed = scores.bottom_k(k)?;
    Ok(PruningPlan {
        rounds: if removed.is_empty() { vec![] } else { vec![removed] },
        metric: scores.metric.name().into(),
        fingerprints: vec![PlanFingerprint {
            model: scores.model_fingerprint.clone(),
            calibration: scores.calibration.clone(),
        }],
        num_layers: scores.num_layers(),
    })
}

/// Maps original indices to positions in the model left after removing
/// `prior` (also original indices) from an `n`-layer model.
pub fn relabel_indices(original: &[usize], prior: &[usize], n: usize) -> Result<Vec<usize>> {
    let gone: BTreeSet<usize> = prior.iter().copied().collect();
    if gone.len() != prior.len() || gone.iter().any(|&i| i >= n) {
        return Err(Error::InvalidLayers("inconsistent removal history".into()));
    }
    original
        .iter()
        .map(|&i| {
            if i >= n || gone.contains(&i) {
                return Err(Error::InvalidLayers(format!("original layer {i} is not present")));
            }
            Ok(i - gone.range(..i).count())
        })
        .collect()
}

/// Inverse of [`relabel_indices`]: original index of each surviving layer.
pub fn surviving_layers(prior: &[usize], n: usize) -> Vec<usize> {
    let gone: BTreeSet<usize> = prior.iter().copied().collect();
    (0..n).filter(|i| !gone.contains(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::reverse_order_scores;
    use proptest::prelude::*;

    #[test]
    fn relabel_examples() {
        assert_eq!(relabel_indices(&[5], &[6, 7], 8).unwrap(), vec![5]);
        assert_eq!(relabel_indices(&[3], &[0], 8).unwrap(), vec![2]);
        assert!(relabel_indices(&[0], &[0], 8).is_err());
        assert!(relabel_indices(&[1], &[2, 2], 8).is_err());
    }

    #[test]
    fn schedule_shorthand() {
        assert_eq!(PruningObjective::parse_schedule("1:1:8").unwrap(), (1, 8));
        assert_eq!(PruningObjective::parse_schedule("1:4:8").unwrap(), (4, 8));
        assert!(PruningObjective::parse_schedule("1:4").is_err());
    }

    #[test]
    fn round_sizes_last_may_be_short() {
        assert_eq!(PruningObjective::iterative(Metric::Taylor, 3, 8).round_sizes(), vec![3, 3, 2]);
        assert_eq!(PruningObjective::one_shot(Metric::Taylor, 8).round_sizes(), vec![8]);
    }

    #[test]
    fn objective_bounds() {
        assert!(PruningObjective::one_shot(Metric::Taylor, 8).validate(8).is_err());
        assert!(PruningObjective::iterative(Metric::Taylor, 0, 2).validate(8).is_err());
        assert!(PruningObjective::iterative(Metric::Taylor, 3, 2).validate(8).is_err());
        assert!(PruningObjective::iterative(Metric::Taylor, 1, 7).validate(8).is_ok());
    }

    #[test]
    fn reverse_order_plan_on_32() {
        let plan = make_plan(&reverse_order_scores(32), 8).unwrap();
        assert_eq!(plan.rounds, vec![(24..32).collect::<Vec<_>>()]);
        assert!(make_plan(&reverse_order_scores(8), 0).unwrap().rounds.is_empty());
    }

    proptest! {
        // relabelling in stages equals relabelling against the whole history
        #[test]
        fn staged_relabel_composes(n in 3usize..12, seed in any::<u64>()) {
            let mut rng = crate::numeric::SeededRng::new(seed);
            let order = rng.permutation(n);
            let cut = 1 + rng.below(n - 2);
            let (first, rest) = order.split_at(cut);
            let target = rest[0];
            let direct = relabel_indices(&[target], first, n).unwrap()[0];
            let survivors = surviving_layers(first, n);
            prop_assert_eq!(survivors[direct], target);
            let (a, b) = first.split_at(first.len() / 2);
            let after_a = relabel_indices(&[target], a, n).unwrap()[0];
            let b_local = relabel_indices(b, a, n).unwrap();
            let staged = relabel_indices(&[after_a], &b_local, n - a.len()).unwrap()[0];
            prop_assert_eq!(staged, direct);
        }
    }
}
