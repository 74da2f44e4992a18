use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{sample_calibration, CalibrationSet, TokenizedCorpus, TrainExample};
use crate::error::{Error, Result};
use crate::evalkit::sequence_perplexity;
use crate::finetune::{
    adapter_trainable_count, apply_freeze, attach_adapters, merge_adapters, train, FreezePolicy, LossPoint,
    TrainConfig, DEFAULT_ALPHA, DEFAULT_TARGETS,
};
use crate::metrics::{score_layers, LayerScoreSet, Metric};
use crate::model::{MatrixRole, TransformerModel};
use crate::numeric::{derive_seed, Real};
use crate::pruning::plan::{relabel_indices, PruningObjective, PruningPlan, PlanFingerprint, Strategy};

/// Recovery step run after each removal round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum FinetuneMethod {
    None,
    Lora {
        rank: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_targets")]
        targets: Vec<MatrixRole>,
    },
    Partial { policy: FreezePolicy },
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_targets() -> Vec<MatrixRole> {
    DEFAULT_TARGETS.to_vec()
}

impl FinetuneMethod {
    /// `none`, `lora`, `lora:<rank>`, `partial:k`, `lm-head`, `full`.
    pub fn parse(s: &str, default_rank: usize) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "none" {
            return Ok(FinetuneMethod::None);
        }
        if let Some(rest) = s.strip_prefix("lora") {
            let rank = match rest.strip_prefix(':') {
                Some(r) => r
                    .parse()
                    .map_err(|_| Error::config("finetune", format!("bad lora rank `{r}`")))?,
                None if rest.is_empty() => default_rank,
                None => return Err(Error::config("finetune", format!("unknown method `{s}`"))),
            };
            return Ok(FinetuneMethod::Lora {
                rank,
                alpha: DEFAULT_ALPHA,
                targets: default_targets(),
            });
        }
        let policy = FreezePolicy::parse(&s).map_err(|e| Error::config("finetune", e.to_string()))?;
        if policy == FreezePolicy::Adapter {
            return Err(Error::config("finetune", "use `lora` for adapter fine-tuning"));
        }
        Ok(FinetuneMethod::Partial { policy })
    }

    pub fn label(&self) -> String {
        match self {
            FinetuneMethod::None => "none".into(),
            FinetuneMethod::Lora { rank, .. } => format!("lora(r={rank})"),
            FinetuneMethod::Partial { policy } => policy.to_string(),
        }
    }
}

/// Where calibration data for data-driven metrics comes from.
#[derive(Debug, Clone, Copy)]
pub enum CalibrationSource<'a> {
    None,
    /// The same set every round.
    Fixed(&'a CalibrationSet),
    /// Drawn from `corpus`; round `r > 0` uses a seed derived from `seed`
    /// and `r` unless `reuse` is set.
    Corpus {
        corpus: &'a TokenizedCorpus,
        count: usize,
        seq_len: usize,
        seed: u64,
        reuse: bool,
    },
}

impl CalibrationSource<'_> {
    fn for_round(&self, round: usize) -> Result<Option<CalibrationSet>> {
        match *self {
            CalibrationSource::None => Ok(None),
            CalibrationSource::Fixed(set) => Ok(Some(set.clone())),
            CalibrationSource::Corpus {
                corpus,
                count,
                seq_len,
                seed,
                reuse,
            } => {
                let s = if reuse || round == 0 { seed } else { derive_seed(seed, round as u64) };
                sample_calibration(corpus, count, seq_len, s).map(Some)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub objective: PruningObjective,
    pub finetune: FinetuneMethod,
    #[serde(default)]
    pub train: TrainConfig,
    /// Original indices that are never removed.
    #[serde(default)]
    pub protect: Vec<usize>,
    /// Accept lm-head training on tied embeddings.
    #[serde(default)]
    pub allow_tied: bool,
}

impl PipelineConfig {
    pub fn new(objective: PruningObjective) -> Self {
        Self {
            objective,
            finetune: FinetuneMethod::None,
            train: TrainConfig::default(),
            protect: Vec::new(),
            allow_tied: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub method: String,
    pub trainable: u64,
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub curve: Vec<LossPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub scores: LayerScoreSet,
    /// Removed blocks in original indexing.
    pub removed: Vec<usize>,
    /// The same blocks in the indexing of the model the round started from.
    pub removed_local: Vec<usize>,
    pub layers_after: usize,
    pub params_after: u64,
    /// Calibration perplexity straight after removal.
    pub ppl_pruned: Option<f64>,
    pub finetune: Option<FinetuneSummary>,
    /// Calibration perplexity after recovery.
    pub ppl_recovered: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub metric: String,
    pub strategy: Strategy,
    pub effective_step: usize,
    pub total: usize,
    pub finetune: String,
    pub base_fingerprint: String,
    pub base_layers: usize,
    pub base_params: u64,
    pub rounds: Vec<RoundRecord>,
    pub final_fingerprint: Option<String>,
    pub final_layers: usize,
    pub error: Option<String>,
    pub seconds: f64,
}

impl PipelineRecord {
    /// All removed blocks, original indexing, ascending.
    pub fn removed(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.rounds.iter().flat_map(|r| r.removed.iter().copied()).collect();
        all.sort_unstable();
        all
    }

    pub fn plan(&self) -> PruningPlan {
        PruningPlan {
            rounds: self.rounds.iter().map(|r| r.removed.clone()).collect(),
            metric: self.metric.clone(),
            fingerprints: self
                .rounds
                .iter()
                .map(|r| PlanFingerprint {
                    model: r.scores.model_fingerprint.clone(),
                    calibration: r.scores.calibration.clone(),
                })
                .collect(),
            num_layers: self.base_layers,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }
}

/// Result of a pipeline run. The record is kept even when a stage fails.
#[derive(Debug)]
pub struct PipelineOutcome<T: Real> {
    pub record: PipelineRecord,
    pub model: Result<TransformerModel<T>>,
}

/// Step size actually used: partial fine-tuning of the last `k` blocks
/// never removes more than `k` blocks per round.
pub fn effective_step(objective: &PruningObjective, finetune: &FinetuneMethod) -> usize {
    let step = objective.strategy.step(objective.total);
    match finetune {
        FinetuneMethod::Partial {
            policy: FreezePolicy::LmHeadPlusLast(k),
        } => step.min(*k),
        _ => step,
    }
}

/// Score → remove → (fine-tune → merge) rounds until `total` blocks are gone.
pub fn run_pipeline<T: Real>(
    model: &TransformerModel<T>,
    config: &PipelineConfig,
    calibration: CalibrationSource<'_>,
    sft: &[TrainExample],
) -> PipelineOutcome<T> {
    let start = Instant::now();
    let obj = &config.objective;
    let step = effective_step(obj, &config.finetune);
    let mut record = PipelineRecord {
        metric: obj.metric.name().into(),
        strategy: obj.strategy,
        effective_step: step,
        total: obj.total,
        finetune: config.finetune.label(),
        base_fingerprint: model.fingerprint(),
        base_layers: model.num_layers(),
        base_params: model.num_params() as u64,
        rounds: Vec::new(),
        final_fingerprint: None,
        final_layers: model.num_layers(),
        error: None,
        seconds: 0.0,
    };
    let result = drive(model, config, step, calibration, sft, &mut record);
    record.seconds = start.elapsed().as_secs_f64();
    match &result {
        Ok(m) => {
            record.final_fingerprint = Some(m.fingerprint());
            record.final_layers = m.num_layers();
        }
        Err(e) => {
            log::error!("pipeline stopped: {e}");
            record.error = Some(e.to_string());
        }
    }
    PipelineOutcome { record, model: result }
}

fn drive<T: Real>(
    model: &TransformerModel<T>,
    config: &PipelineConfig,
    step: usize,
    calibration: CalibrationSource<'_>,
    sft: &[TrainExample],
    record: &mut PipelineRecord,
) -> Result<TransformerModel<T>> {
    let obj = &config.objective;
    let n = model.num_layers();
    obj.validate(n)?;
    if let Some(&p) = config.protect.iter().find(|&&p| p >= n) {
        return Err(Error::Schedule(format!("protected layer {p} does not exist")));
    }
    if n - config.protect.len().min(n) < obj.total {
        return Err(Error::Schedule("protected layers leave too few candidates".into()));
    }
    if config.finetune != FinetuneMethod::None && sft.is_empty() {
        return Err(Error::config("finetune", "fine-tuning needs a non-empty SFT dataset"));
    }
    if obj.metric.needs_calibration() && matches!(calibration, CalibrationSource::None) {
        return Err(Error::config(
            "calibration",
            format!("metric `{}` needs calibration data", obj.metric),
        ));
    }
    let mut current = model.clone();
    let mut history: Vec<usize> = Vec::new();
    let mut left = obj.total;
    let mut round = 0;
    while left > 0 {
        let t0 = Instant::now();
        let take = step.min(left);
        let calib = if obj.metric.needs_calibration() {
            calibration.for_round(round)?
        } else {
            None
        };
        let metric = match obj.metric {
            Metric::Random { seed } if round > 0 => Metric::Random {
                seed: derive_seed(seed, round as u64),
            },
            m => m,
        };
        let scores = score_layers(&current, metric, calib.as_ref())?;
        let survivors = crate::pruning::surviving_layers(&history, n);
        let mut local: Vec<usize> = scores
            .prune_order()
            .into_iter()
            .filter(|&c| !config.protect.contains(&survivors[c]))
            .take(take)
            .collect();
        if local.len() < take {
            return Err(Error::Schedule(format!("round {round}: only {} removable layers", local.len())));
        }
        local.sort_unstable();
        let removed: Vec<usize> = local.iter().map(|&c| survivors[c]).collect();
        debug_assert_eq!(relabel_indices(&removed, &history, n)?, local);
        let before = current.num_params();
        current = current.remove_layers(&local)?;
        debug_assert!(current.num_params() < before);
        history.extend_from_slice(&removed);
        log::info!("round {round}: removed {removed:?} (local {local:?})");

        let eval_set = match &calib {
            Some(c) => Some(c.clone()),
            None => calibration.for_round(round)?,
        };
        let ppl = |m: &TransformerModel<T>| -> Result<Option<f64>> {
            eval_set.as_ref().map(|c| sequence_perplexity(m, &c.sequences)).transpose()
        };
        let ppl_pruned = ppl(&current)?;
        let mut entry = RoundRecord {
            round,
            scores,
            removed,
            removed_local: local,
            layers_after: current.num_layers(),
            params_after: current.num_params() as u64,
            ppl_pruned,
            finetune: None,
            ppl_recovered: None,
            seconds: 0.0,
        };
        let train_cfg = TrainConfig {
            seed: derive_seed(config.train.seed, round as u64),
            ..config.train.clone()
        };
        let tuned = recover(current.clone(), &config.finetune, &train_cfg, sft, config.allow_tied);
        match tuned {
            Ok((m, summary)) => {
                current = m;
                if summary.is_some() {
                    entry.ppl_recovered = ppl(&current)?;
                }
                entry.finetune = summary;
            }
            Err(e) => {
                entry.seconds = t0.elapsed().as_secs_f64();
                record.rounds.push(entry);
                return Err(e);
            }
        }
        entry.seconds = t0.elapsed().as_secs_f64();
        record.rounds.push(entry);
        left -= take;
        round += 1;
    }
    Ok(current)
}

/// Runs the configured recovery on a freshly pruned model. Adapters are
/// merged back before returning; the returned model is fully trainable.
pub fn recover<T: Real>(
    model: TransformerModel<T>,
    method: &FinetuneMethod,
    config: &TrainConfig,
    sft: &[TrainExample],
    allow_tied: bool,
) -> Result<(TransformerModel<T>, Option<FinetuneSummary>)> {
    match method {
        FinetuneMethod::None => Ok((model, None)),
        FinetuneMethod::Lora { rank, alpha, targets } => {
            let trainable = adapter_trainable_count(model.spec(), targets, *rank);
            let mut adapted = attach_adapters(model, targets, *rank, *alpha, derive_seed(config.seed, 0xada))?;
            let out = train(&mut adapted, sft, config)?;
            let merged = merge_adapters(adapted)?;
            Ok((merged, Some(summary(method, trainable, out.curve))))
        }
        FinetuneMethod::Partial { policy } => {
            let mut m = model;
            let trainable = apply_freeze(&mut m, *policy, allow_tied)?;
            let out = train(&mut m, sft, config)?;
            m.set_all_trainable(true);
            Ok((m, Some(summary(method, trainable, out.curve))))
        }
    }
}

fn summary(method: &FinetuneMethod, trainable: u64, curve: Vec<LossPoint>) -> FinetuneSummary {
    FinetuneSummary {
        method: method.label(),
        trainable,
        steps: curve.len(),
        initial_loss: curve.first().map(|p| p.loss),
        final_loss: curve.last().map(|p| p.loss),
        curve,
    }
}

/// Scores once and removes `k` blocks; no fine-tuning.
pub fn one_shot_prune<T: Real>(
    model: &TransformerModel<T>,
    metric: Metric,
    k: usize,
    calibration: CalibrationSource<'_>,
) -> Result<(TransformerModel<T>, PipelineRecord)> {
    let cfg = PipelineConfig::new(PruningObjective::one_shot(metric, k));
    let out = run_pipeline(model, &cfg, calibration, &[]);
    Ok((out.model?, out.record))
}

/// Removes `total` blocks `step` at a time, rescoring the current model each
/// round and recovering with `finetune` in between.
pub fn iterative_prune<T: Real>(
    model: &TransformerModel<T>,
    metric: Metric,
    step: usize,
    total: usize,
    calibration: CalibrationSource<'_>,
    finetune: FinetuneMethod,
    train: TrainConfig,
    sft: &[TrainExample],
) -> PipelineOutcome<T> {
    let cfg = PipelineConfig {
        finetune,
        train,
        ..PipelineConfig::new(PruningObjective::iterative(metric, step, total))
    };
    run_pipeline(model, &cfg, calibration, sft)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerSpec;

    fn toy() -> TransformerModel<f32> {
        let spec = TransformerSpec::preset("toy-8x64").unwrap().with_vocab(16);
        TransformerModel::new(spec, 4).unwrap()
    }

    fn corpus() -> TokenizedCorpus {
        TokenizedCorpus {
            name: "c".into(),
            documents: (0..4).map(|d| (0..60).map(|i| 3 + ((i * (d + 2)) % 13) as u32).collect()).collect(),
        }
    }

    #[test]
    fn reverse_order_one_shot_on_toy() {
        let m = toy();
        let (pruned, rec) = one_shot_prune(&m, Metric::ReverseOrder, 2, CalibrationSource::None).unwrap();
        assert_eq!(pruned.num_layers(), 6);
        assert_eq!(rec.rounds.len(), 1);
        assert_eq!(rec.removed(), vec![6, 7]);
        assert_eq!(pruned, m.remove_layers(&[6, 7]).unwrap());
    }

    #[test]
    fn reverse_order_iterative_matches_one_shot() {
        let m = toy();
        for step in 1..=3 {
            let out = iterative_prune(
                &m,
                Metric::ReverseOrder,
                step,
                3,
                CalibrationSource::None,
                FinetuneMethod::None,
                TrainConfig::default(),
                &[],
            );
            assert_eq!(out.record.removed(), vec![5, 6, 7]);
        }
    }

    #[test]
    fn shrinkage_is_per_layer_mass() {
        let m = toy();
        let c = corpus();
        let src = CalibrationSource::Corpus {
            corpus: &c,
            count: 4,
            seq_len: 16,
            seed: 1,
            reuse: false,
        };
        let out = iterative_prune(&m, Metric::BlockInfluence, 1, 3, src, FinetuneMethod::None, TrainConfig::default(), &[]);
        let block = m.spec().block_params();
        let mut prev = m.num_params() as u64;
        for r in &out.record.rounds {
            assert_eq!(prev - r.params_after, block);
            prev = r.params_after;
        }
        assert_eq!(out.record.plan().apply(&m).unwrap(), out.model.unwrap());
    }

    #[test]
    fn partial_step_clamped() {
        let obj = PruningObjective::iterative(Metric::Taylor, 4, 4);
        let ft = FinetuneMethod::Partial {
            policy: FreezePolicy::LmHeadPlusLast(2),
        };
        assert_eq!(effective_step(&obj, &ft), 2);
    }

    #[test]
    fn protected_layers_survive() {
        let m = toy();
        let cfg = PipelineConfig {
            protect: vec![7],
            ..PipelineConfig::new(PruningObjective::one_shot(Metric::ReverseOrder, 2))
        };
        let out = run_pipeline(&m, &cfg, CalibrationSource::None, &[]);
        assert_eq!(out.record.removed(), vec![5, 6]);
    }

    #[test]
    fn failure_keeps_record() {
        let m = toy();
        let cfg = PipelineConfig {
            finetune: FinetuneMethod::Lora {
                rank: 1000,
                alpha: 16.0,
                targets: vec![MatrixRole::Q],
            },
            ..PipelineConfig::new(PruningObjective::one_shot(Metric::ReverseOrder, 1))
        };
        let ex = vec![TrainExample::language_modeling(vec![1, 3, 4, 5])];
        let out = run_pipeline(&m, &cfg, CalibrationSource::None, &ex);
        assert!(out.model.is_err());
        assert_eq!(out.record.rounds.len(), 1);
        assert!(out.record.error.is_some());
    }

    #[test]
    fn method_parse() {
        assert_eq!(FinetuneMethod::parse("none", 8).unwrap(), FinetuneMethod::None);
        assert!(matches!(FinetuneMethod::parse("lora", 8).unwrap(), FinetuneMethod::Lora { rank: 8, .. }));
        assert_eq!(
            FinetuneMethod::parse("partial:3", 8).unwrap(),
            FinetuneMethod::Partial {
                policy: FreezePolicy::LmHeadPlusLast(3)
            }
        );
        assert!(FinetuneMethod::parse("adapter", 8).is_err());
    }
}
