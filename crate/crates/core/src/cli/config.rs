use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_eval_task, load_sft, Corpus, SftFormat, Tokenizer, TrainExample};
use crate::error::{Error, Result};
use crate::evalkit::{ChoiceNormalization, EvalSuite};
use crate::finetune::{BaseTrainConfig, TrainConfig, DEFAULT_ALPHA};
use crate::metrics::Metric;
use crate::model::{MatrixRole, TransformerSpec};
use crate::pruning::{FinetuneMethod, PipelineConfig, PruningObjective, Strategy};

/// Overrides the config seed when set.
pub const SEED_ENV: &str = "PRUNELAB_SEED";

/// One experiment, read from a TOML file. Relative paths are resolved
/// against the file's directory on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Row label in reports; derived from metric and fine-tune when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub base_training: BaseTrainingSection,
    #[serde(default)]
    pub pruning: PruningSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Name of a shipped spec preset; ignored when `spec` is set.
    pub preset: String,
    /// Path to a spec TOML file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    /// Base checkpoint for every verb except `train-base`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// `ascii` or `byte`; a `vocab.txt` beside the checkpoint wins.
    pub tokenizer: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "toy-8x64".into(),
            spec: None,
            checkpoint: None,
            tokenizer: "ascii".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSource {
    pub name: String,
    pub path: PathBuf,
    pub format: SftFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Base-training corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Corpus calibration windows are drawn from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    pub calibration_count: usize,
    pub calibration_seq_len: usize,
    /// Reuse round-0 calibration windows in later iterative rounds.
    pub reuse_calibration: bool,
    /// Instruction datasets; the first one drives recovery.
    pub sft: Vec<SftSource>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus: None,
            calibration: None,
            calibration_count: 10,
            calibration_seq_len: 64,
            reuse_calibration: false,
            sft: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainingSection {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
}

impl Default for BaseTrainingSection {
    fn default() -> Self {
        let d = BaseTrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            seq_len: d.seq_len,
            lr: d.lr,
            warmup_steps: d.warmup_steps,
            weight_decay: d.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningSection {
    pub metric: String,
    /// `one-shot` or `iterative`.
    pub strategy: String,
    /// Blocks per round for `iterative`; defaults to 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub total: usize,
    /// Tolerated relative accuracy drop, reported as a flag.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub protect: Vec<usize>,
    pub allow_tied: bool,
}

impl Default for PruningSection {
    fn default() -> Self {
        Self {
            metric: "reverse-order".into(),
            strategy: "one-shot".into(),
            step: None,
            total: 2,
            alpha: None,
            protect: Vec::new(),
            allow_tied: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// `none`, `lora`, `lora:<rank>`, `partial:k`, `lm-head`, `full`.
    pub method: String,
    pub rank: usize,
    pub alpha: f64,
    /// Adapter target matrices.
    pub targets: Vec<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            method: "none".into(),
            rank: d.rank,
            alpha: DEFAULT_ALPHA,
            targets: MatrixRole::ALL.iter().map(|r| r.to_string()).collect(),
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            warmup_steps: d.warmup_steps,
            weight_decay: d.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub corpora: Vec<PathBuf>,
    pub tasks: Vec<PathBuf>,
    pub normalization: ChoiceNormalization,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            corpora: Vec::new(),
            tasks: Vec::new(),
            normalization: ChoiceNormalization::Sum,
            window: None,
        }
    }
}

fn toml_error(e: &toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let field = msg
        .strip_prefix("missing field `")
        .and_then(|r| r.split('`').next())
        .map(str::to_string)
        .or_else(|| msg.strip_prefix("unknown field `").and_then(|r| r.split('`').next()).map(str::to_string))
        .unwrap_or_else(|| "config".into());
    let at = e
        .span()
        .map(|s| format!(" (byte {})", s.start))
        .unwrap_or_default();
    Error::config(field, format!("{msg}{at}"))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Parses, resolves relative paths against `base_dir`, applies the seed
    /// override and validates.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| toml_error(&e))?;
        cfg.resolve_paths(base_dir);
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read `{}`: {e}", path.display())))?;
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&text, dir)
    }

    /// Fully resolved TOML; loading it reproduces this config.
    pub fn snapshot(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        for p in [&mut self.model.spec, &mut self.model.checkpoint, &mut self.data.corpus, &mut self.data.calibration]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        for s in &mut self.data.sft {
            resolve(base, &mut s.path);
        }
        for p in self.eval.corpora.iter_mut().chain(self.eval.tasks.iter_mut()) {
            resolve(base, p);
        }
    }

    /// Checks every field that does not depend on the verb: referenced paths
    /// exist and every enumerated string parses.
    pub fn validate(&self) -> Result<()> {
        let exists = |field: &str, p: &Path| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::config(field, format!("path `{}` does not exist", p.display())))
            }
        };
        if let Some(p) = &self.model.spec {
            exists("model.spec", p)?;
        } else {
            TransformerSpec::preset(&self.model.preset).map_err(|e| Error::config("model.preset", e.to_string()))?;
        }
        if let Some(p) = &self.model.checkpoint {
            exists("model.checkpoint", p)?;
        }
        self.fallback_tokenizer()?;
        if let Some(p) = &self.data.corpus {
            exists("data.corpus", p)?;
        }
        if let Some(p) = &self.data.calibration {
            exists("data.calibration", p)?;
        }
        if self.data.calibration_count == 0 {
            return Err(Error::config("data.calibration_count", "must be positive"));
        }
        if self.data.calibration_seq_len < 2 {
            return Err(Error::config("data.calibration_seq_len", "must be at least 2"));
        }
        for (i, s) in self.data.sft.iter().enumerate() {
            exists(&format!("data.sft[{i}].path"), &s.path)?;
        }
        for (i, p) in self.eval.corpora.iter().enumerate() {
            exists(&format!("eval.corpora[{i}]"), p)?;
        }
        for (i, p) in self.eval.tasks.iter().enumerate() {
            exists(&format!("eval.tasks[{i}]"), p)?;
        }
        if self.eval.window.is_some_and(|w| w < 2) {
            return Err(Error::config("eval.window", "must be at least 2"));
        }
        self.base_config()?;
        self.pipeline_config()?;
        Ok(())
    }

    pub fn require<'a>(field: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::config(field, "required by this command but not set"))
    }

    pub fn spec(&self) -> Result<TransformerSpec> {
        match &self.model.spec {
            Some(p) => TransformerSpec::load(p),
            None => TransformerSpec::preset(&self.model.preset),
        }
    }

    /// Tokenizer named by `model.tokenizer`.
    pub fn fallback_tokenizer(&self) -> Result<Tokenizer> {
        match self.model.tokenizer.as_str() {
            "ascii" => Ok(Tokenizer::printable_ascii()),
            "byte" => Ok(Tokenizer::byte_level()),
            other => Err(Error::config("model.tokenizer", format!("expected `ascii` or `byte`, got `{other}`"))),
        }
    }

    pub fn base_config(&self) -> Result<BaseTrainConfig> {
        let b = &self.base_training;
        let cfg = BaseTrainConfig {
            steps: b.steps,
            batch_size: b.batch_size,
            seq_len: b.seq_len,
            lr: b.lr,
            warmup_steps: b.warmup_steps,
            weight_decay: b.weight_decay,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn metric(&self) -> Result<Metric> {
        Metric::parse(&self.pruning.metric, self.seed).map_err(|e| Error::config("pruning.metric", e.to_string()))
    }

    pub fn objective(&self) -> Result<PruningObjective> {
        let p = &self.pruning;
        let strategy = match p.strategy.as_str() {
            "one-shot" => Strategy::OneShot,
            "iterative" => Strategy::Iterative {
                step: p.step.unwrap_or(1),
            },
            other => {
                return Err(Error::config(
                    "pruning.strategy",
                    format!("expected `one-shot` or `iterative`, got `{other}`"),
                ))
            }
        };
        if let (Strategy::Iterative { step: 0 }, _) | (_, 0) = (strategy, p.total) {
            return Err(Error::config("pruning", "step and total must be positive"));
        }
        if let Some(a) = p.alpha {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::config("pruning.alpha", "must lie in [0, 1)"));
            }
        }
        Ok(PruningObjective {
            metric: self.metric()?,
            total: p.total,
            strategy,
            alpha: p.alpha,
        })
    }

    pub fn finetune_method(&self) -> Result<FinetuneMethod> {
        let f = &self.finetune;
        let mut method = FinetuneMethod::parse(&f.method, f.rank).map_err(|e| Error::config("finetune.method", e.to_string()))?;
        if let FinetuneMethod::Lora { alpha, targets, .. } = &mut method {
            *alpha = f.alpha;
            *targets = f
                .targets
                .iter()
                .map(|t| MatrixRole::parse(t))
                .collect::<Result<_>>()
                .map_err(|e| Error::config("finetune.targets", e.to_string()))?;
        }
        Ok(method)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let f = &self.finetune;
        let rank = match self.finetune_method()? {
            FinetuneMethod::Lora { rank, .. } => rank,
            _ => f.rank,
        };
        let cfg = TrainConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            warmup_steps: f.warmup_steps,
            rank,
            alpha: f.alpha,
            weight_decay: f.weight_decay,
            seed: self.seed,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(|e| match e {
            Error::Config { field, msg } => Error::config(format!("finetune.{field}"), msg),
            e => e,
        })?;
        Ok(cfg)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            objective: self.objective()?,
            finetune: self.finetune_method()?,
            train: self.train_config()?,
            protect: self.pruning.protect.clone(),
            allow_tied: self.pruning.allow_tied,
        })
    }

    /// Row label for reports.
    pub fn run_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            let ft = self.finetune_method().map(|m| m.label()).unwrap_or_default();
            format!("{}+{ft}", self.pruning.metric)
        })
    }

    /// Every instruction dataset as `(name, examples)`, truncated to `max_seq_len`.
    pub fn sft_examples(&self, tok: &Tokenizer, max_seq_len: usize) -> Result<Vec<(String, Vec<TrainExample>)>> {
        self.data
            .sft
            .iter()
            .map(|s| Ok((s.name.clone(), load_sft(&s.path, s.format, max_seq_len)?.examples(tok)?)))
            .collect()
    }

    pub fn eval_suite(&self, tok: &Tokenizer) -> Result<EvalSuite> {
        let corpora = self
            .eval
            .corpora
            .iter()
            .map(|p| Corpus::load(p)?.tokenize(tok))
            .collect::<Result<_>>()?;
        let tasks = self.eval.tasks.iter().map(|p| load_eval_task(p)).collect::<Result<_>>()?;
        let suite = EvalSuite {
            corpora,
            tasks,
            normalization: self.eval.normalization,
            window: self.eval.window,
        };
        if suite.is_empty() {
            return Err(Error::config("eval", "needs at least one corpus or task"));
        }
        Ok(suite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR"))
    }

    #[test]
    fn missing_seed_names_the_field() {
        let e = ExperimentConfig::parse("output_dir = \"x\"\n", &dir()).unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "seed"), "{e}");
        assert!(e.is_validation());
    }

    #[test]
    fn missing_corpus_names_the_field() {
        let text = "seed = 1\noutput_dir = \"x\"\n[data]\ncorpus = \"data/nope.txt\"\n";
        let e = ExperimentConfig::parse(text, &dir()).unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "data.corpus"), "{e}");
    }

    #[test]
    fn unknown_key_rejected() {
        let e = ExperimentConfig::parse("seed = 1\noutput_dir = \"x\"\nsede = 2\n", &dir()).unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "sede"), "{e}");
    }

    #[test]
    fn bad_enumerations_rejected() {
        for (extra, field) in [
            ("[pruning]\nmetric = \"cosine\"", "pruning.metric"),
            ("[pruning]\nstrategy = \"greedy\"", "pruning.strategy"),
            ("[finetune]\nmethod = \"partial:9\"", "finetune.method"),
            ("[model]\ntokenizer = \"bpe\"", "model.tokenizer"),
        ] {
            let text = format!("seed = 1\noutput_dir = \"x\"\n{extra}\n");
            let e = ExperimentConfig::parse(&text, &dir()).unwrap_err();
            assert!(matches!(&e, Error::Config { field: f, .. } if f == field), "{extra}: {e}");
        }
    }

    #[test]
    fn relative_paths_resolve_and_snapshot_round_trips() {
        let text = "seed = 3\noutput_dir = \"runs/a\"\n[data]\ncorpus = \"data/toy_corpus.txt\"\n\
                    [[data.sft]]\nname = \"alpaca\"\npath = \"data/alpaca_toy.jsonl\"\nformat = \"alpaca\"\n";
        let cfg = ExperimentConfig::parse(text, &dir()).unwrap();
        assert_eq!(cfg.data.corpus.as_deref(), Some(dir().join("data/toy_corpus.txt").as_path()));
        let again = ExperimentConfig::parse(&cfg.snapshot(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn lora_settings_flow_into_method() {
        let text = "seed = 1\noutput_dir = \"x\"\n[finetune]\nmethod = \"lora:4\"\nalpha = 8.0\ntargets = [\"q\", \"v\"]\n";
        let cfg = ExperimentConfig::parse(text, &dir()).unwrap();
        assert_eq!(
            cfg.finetune_method().unwrap(),
            FinetuneMethod::Lora {
                rank: 4,
                alpha: 8.0,
                targets: vec![MatrixRole::Q, MatrixRole::V]
            }
        );
        assert_eq!(cfg.train_config().unwrap().rank, 4);
    }
}
