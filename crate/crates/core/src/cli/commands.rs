use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cli::ExperimentConfig;
use crate::data::{sample_calibration, Corpus, TokenizedCorpus, Tokenizer, TrainExample, BOS};
use crate::error::{Error, Result};
use crate::evalkit::{build_report, merge_reports, sensitivity_sweep, EvalReport, SweepBase, SweepKind, SweepReport};
use crate::finetune::{curve_csv, pretrain};
use crate::metrics::{score_layers, LayerScoreSet, Metric};
use crate::model::{load_checkpoint, save_checkpoint, TrainingMetadata, TransformerModel};
use crate::pruning::{recover, run_pipeline, CalibrationSource, FinetuneMethod, FinetuneSummary, PipelineRecord};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const RECORD_FILE: &str = "record.json";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CURVE_DIR: &str = "curves";
pub const VOCAB_FILE: &str = "vocab.txt";

/// A run directory with the fixed layout, created on open.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the layout and writes the resolved config snapshot.
    pub fn create(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg.output_dir.clone();
        for d in [root.clone(), root.join(CHECKPOINT_DIR), root.join(CURVE_DIR)] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let run = Self { root };
        run.write(SNAPSHOT_FILE, &cfg.snapshot())?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, contents: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Saves `model` under `checkpoints/` with the tokenizer beside it.
    /// Refuses to overwrite the config's source checkpoint.
    pub fn save_model(
        &self,
        cfg: &ExperimentConfig,
        name: &str,
        model: &TransformerModel<f32>,
        tok: &Tokenizer,
        step: u64,
    ) -> Result<PathBuf> {
        let p = self.path(&format!("{CHECKPOINT_DIR}/{name}.ckpt"));
        if let Some(src) = &cfg.model.checkpoint {
            if same_file(src, &p) {
                return Err(Error::config(
                    "output_dir",
                    format!("would overwrite the source checkpoint `{}`", src.display()),
                ));
            }
        }
        let meta = TrainingMetadata {
            seed: cfg.seed,
            step,
            dataset_fingerprint: None,
        };
        save_checkpoint(model, &meta, &p)?;
        tok.save(&self.path(&format!("{CHECKPOINT_DIR}/{VOCAB_FILE}")))?;
        Ok(p)
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// Model and tokenizer named by a config. The tokenizer comes from a
/// `vocab.txt` beside the checkpoint when present.
pub fn load_model(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(TransformerModel<f32>, Tokenizer)> {
    let path = match checkpoint {
        Some(p) => p,
        None => ExperimentConfig::require("model.checkpoint", &cfg.model.checkpoint)?,
    };
    let ckpt = load_checkpoint::<f32>(path)?;
    let vocab = path.with_file_name(VOCAB_FILE);
    let tok = if vocab.exists() {
        Tokenizer::load(&vocab)?
    } else {
        cfg.fallback_tokenizer()?
    };
    if tok.vocab_size() != ckpt.model.spec().vocab_size {
        return Err(Error::config(
            "model.tokenizer",
            format!(
                "tokenizer has {} ids but the checkpoint expects {}",
                tok.vocab_size(),
                ckpt.model.spec().vocab_size
            ),
        ));
    }
    Ok((ckpt.model, tok))
}

fn tokenized(path: &Path, tok: &Tokenizer) -> Result<TokenizedCorpus> {
    Corpus::load(path)?.tokenize(tok)
}

fn calibration_corpus(cfg: &ExperimentConfig, tok: &Tokenizer) -> Result<Option<TokenizedCorpus>> {
    cfg.data.calibration.as_deref().map(|p| tokenized(p, tok)).transpose()
}

fn source<'a>(cfg: &ExperimentConfig, corpus: Option<&'a TokenizedCorpus>) -> CalibrationSource<'a> {
    match corpus {
        Some(corpus) => CalibrationSource::Corpus {
            corpus,
            count: cfg.data.calibration_count,
            seq_len: cfg.data.calibration_seq_len,
            seed: cfg.seed,
            reuse: cfg.data.reuse_calibration,
        },
        None => CalibrationSource::None,
    }
}

/// First instruction dataset, as training examples.
fn recovery_set(cfg: &ExperimentConfig, tok: &Tokenizer, max_seq_len: usize) -> Result<Vec<TrainExample>> {
    Ok(cfg
        .sft_examples(tok, max_seq_len)?
        .into_iter()
        .next()
        .map(|(_, ex)| ex)
        .unwrap_or_default())
}

fn write_curves(run: &RunDir, record: &PipelineRecord) -> Result<()> {
    for r in &record.rounds {
        if let Some(ft) = &r.finetune {
            run.write(&format!("{CURVE_DIR}/round{}.csv", r.round), &curve_csv(&ft.curve)?)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainRecord {
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub fingerprint: String,
    pub seconds: f64,
}

/// Trains a fresh model on `data.corpus`; writes the checkpoint, vocabulary
/// and loss curve.
pub fn cmd_train_base(cfg: &ExperimentConfig) -> Result<BaseTrainRecord> {
    let corpus_path = ExperimentConfig::require("data.corpus", &cfg.data.corpus)?;
    let base_cfg = cfg.base_config()?;
    let tok = cfg.fallback_tokenizer()?;
    let spec = cfg.spec()?.with_vocab(tok.vocab_size());
    let corpus = tokenized(corpus_path, &tok)?;
    let run = RunDir::create(cfg)?;
    let start = Instant::now();
    let mut model = TransformerModel::<f32>::new(spec, cfg.seed)?;
    let outcome = pretrain(&mut model, &corpus, &base_cfg)?;
    run.write(&format!("{CURVE_DIR}/base.csv"), &outcome.curve_csv()?)?;
    let checkpoint = run.save_model(cfg, "base", &model, &tok, base_cfg.steps as u64)?;
    let record = BaseTrainRecord {
        steps: outcome.curve.len(),
        initial_loss: outcome.initial_loss(),
        final_loss: outcome.final_loss(),
        checkpoint,
        fingerprint: model.fingerprint(),
        seconds: start.elapsed().as_secs_f64(),
    };
    run.write(RECORD_FILE, &serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

/// Scores every block of the base checkpoint with `pruning.metric`.
pub fn cmd_score(cfg: &ExperimentConfig) -> Result<LayerScoreSet> {
    let metric = cfg.metric()?;
    let (model, tok) = load_model(cfg, None)?;
    let calib = if metric.needs_calibration() {
        let path = ExperimentConfig::require("data.calibration", &cfg.data.calibration)?;
        let corpus = tokenized(path, &tok)?;
        Some(sample_calibration(
            &corpus,
            cfg.data.calibration_count,
            cfg.data.calibration_seq_len,
            cfg.seed,
        )?)
    } else {
        None
    };
    let scores = score_layers(&model, metric, calib.as_ref())?;
    let run = RunDir::create(cfg)?;
    run.write(&format!("scores-{}.csv", metric.name()), &scores.to_csv()?)?;
    run.write(&format!("scores-{}.json", metric.name()), &scores.to_json())?;
    Ok(scores)
}

/// Removes blocks per the pruning section without any fine-tuning.
pub fn cmd_prune(cfg: &ExperimentConfig) -> Result<PipelineRecord> {
    let (model, tok) = load_model(cfg, None)?;
    let calib = calibration_corpus(cfg, &tok)?;
    let mut pc = cfg.pipeline_config()?;
    pc.finetune = FinetuneMethod::None;
    let run = RunDir::create(cfg)?;
    let out = run_pipeline(&model, &pc, source(cfg, calib.as_ref()), &[]);
    run.write(RECORD_FILE, &out.record.to_json())?;
    let pruned = out.model?;
    run.save_model(cfg, "pruned", &pruned, &tok, 0)?;
    Ok(out.record)
}

/// Runs the configured recovery on `model.checkpoint` as-is.
pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<FinetuneSummary> {
    let method = cfg.finetune_method()?;
    if method == FinetuneMethod::None {
        return Err(Error::config("finetune.method", "is `none`; nothing to train"));
    }
    let train_cfg = cfg.train_config()?;
    let (model, tok) = load_model(cfg, None)?;
    let sft = recovery_set(cfg, &tok, model.spec().max_seq_len)?;
    if sft.is_empty() {
        return Err(Error::config("data.sft", "fine-tuning needs at least one SFT dataset"));
    }
    let run = RunDir::create(cfg)?;
    let (tuned, summary) = recover(model, &method, &train_cfg, &sft, cfg.pruning.allow_tied)?;
    let summary = summary.expect("a method other than none trains");
    run.write(&format!("{CURVE_DIR}/finetune.csv"), &curve_csv(&summary.curve)?)?;
    run.write(RECORD_FILE, &serde_json::to_string_pretty(&summary)?)?;
    run.save_model(cfg, "finetuned", &tuned, &tok, summary.steps as u64)?;
    Ok(summary)
}

/// Evaluates `checkpoint` (or `model.checkpoint`) on the eval suite.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let (model, tok) = load_model(cfg, checkpoint)?;
    let suite = cfg.eval_suite(&tok)?;
    let run = RunDir::create(cfg)?;
    let report = build_report(&model, &tok, &suite, cfg.label.clone().unwrap_or_else(|| "eval".into()))?;
    run.write(REPORT_FILE, &report.to_json())?;
    Ok(report)
}

/// What a pipeline run leaves behind.
#[derive(Debug)]
pub struct PipelineRun {
    pub dir: RunDir,
    pub record: PipelineRecord,
    pub report: EvalReport,
    /// Report of the unpruned model when `pruning.alpha` is set.
    pub baseline: Option<EvalReport>,
}

/// Score → prune → fine-tune → evaluate. The record is written even when a
/// stage fails.
pub fn cmd_pipeline(cfg: &ExperimentConfig) -> Result<PipelineRun> {
    let pc = cfg.pipeline_config()?;
    let (model, tok) = load_model(cfg, None)?;
    let suite = cfg.eval_suite(&tok)?;
    let calib = calibration_corpus(cfg, &tok)?;
    let sft = recovery_set(cfg, &tok, model.spec().max_seq_len)?;
    let run = RunDir::create(cfg)?;
    let out = run_pipeline(&model, &pc, source(cfg, calib.as_ref()), &sft);
    run.write(RECORD_FILE, &out.record.to_json())?;
    write_curves(&run, &out.record)?;
    let pruned = out.model?;
    run.save_model(cfg, "final", &pruned, &tok, 0)?;
    let mut report = build_report(&pruned, &tok, &suite, cfg.run_label())?;
    let baseline = match pc.objective.alpha {
        Some(alpha) => {
            let b = build_report(&model, &tok, &suite, "base")?;
            report.flag_alpha(&b, alpha);
            Some(b)
        }
        None => None,
    };
    run.write(REPORT_FILE, &report.to_json())?;
    Ok(PipelineRun {
        dir: run,
        record: out.record,
        report,
        baseline,
    })
}

/// Parses `--kind` and `--grid` into a sweep axis.
pub fn parse_sweep(kind: &str, grid: &str) -> Result<SweepKind> {
    let items: Vec<&str> = grid.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let ints = || -> Result<Vec<usize>> {
        items
            .iter()
            .map(|s| s.parse().map_err(|_| Error::config("grid", format!("`{s}` is not a count"))))
            .collect()
    };
    match kind {
        "calibration-count" => Ok(SweepKind::CalibrationCount(ints()?)),
        "prune-rate" => Ok(SweepKind::PruneRate(ints()?)),
        "sft-dataset" => Ok(SweepKind::SftDataset(items.iter().map(|s| s.to_string()).collect())),
        other => Err(Error::config(
            "kind",
            format!("expected calibration-count, prune-rate or sft-dataset, got `{other}`"),
        )),
    }
}

/// Runs the pipeline once per grid point and writes `sweep.csv`/`sweep.json`.
pub fn cmd_sweep(cfg: &ExperimentConfig, kind: &SweepKind) -> Result<SweepReport> {
    let pipeline = cfg.pipeline_config()?;
    let (model, tok) = load_model(cfg, None)?;
    let suite = cfg.eval_suite(&tok)?;
    let path = ExperimentConfig::require("data.calibration", &cfg.data.calibration)?;
    let calib = tokenized(path, &tok)?;
    let sft = cfg.sft_examples(&tok, model.spec().max_seq_len)?;
    let run = RunDir::create(cfg)?;
    let base = SweepBase {
        model: &model,
        tokenizer: &tok,
        pipeline,
        calibration_corpus: &calib,
        calibration_count: cfg.data.calibration_count,
        calibration_seq_len: cfg.data.calibration_seq_len,
        calibration_seed: cfg.seed,
        reuse_calibration: cfg.data.reuse_calibration,
        sft,
        suite: &suite,
    };
    let report = sensitivity_sweep(&base, kind)?;
    run.write("sweep.csv", &report.to_csv()?)?;
    run.write("sweep.json", &report.to_json())?;
    Ok(report)
}

/// Merged comparison table over the `report.json` of each run directory.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::config("runs", "need at least one run directory"));
    }
    let reports = dirs
        .iter()
        .map(|d| {
            let p = d.join(REPORT_FILE);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            EvalReport::from_json(&text)
        })
        .collect::<Result<Vec<_>>>()?;
    merge_reports(&reports)
}

/// Greedy continuation of `prompt`.
pub fn cmd_sample(cfg: &ExperimentConfig, checkpoint: Option<&Path>, prompt: &str, tokens: usize) -> Result<String> {
    let (model, tok) = load_model(cfg, checkpoint)?;
    let mut ids = vec![BOS];
    ids.extend(tok.encode(prompt)?);
    let room = model.spec().max_seq_len.saturating_sub(ids.len());
    let out = model.greedy_generate(&ids, tokens.min(room))?;
    tok.decode(&out[ids.len()..])
}

/// Metric names accepted by `--metric`.
pub fn metric_names() -> Vec<&'static str> {
    Metric::all(0).iter().map(|m| m.name()).collect()
}
