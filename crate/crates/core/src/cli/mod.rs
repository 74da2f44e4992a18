//! Command-line front end. Every verb reads one TOML experiment config and
//! writes into its `output_dir`.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_eval, cmd_finetune, cmd_pipeline, cmd_prune, cmd_report, cmd_sample, cmd_score, cmd_sweep, cmd_train_base,
    load_model, metric_names, parse_sweep, BaseTrainRecord, PipelineRun, RunDir, CHECKPOINT_DIR, CURVE_DIR,
    RECORD_FILE, REPORT_FILE, SNAPSHOT_FILE, VOCAB_FILE,
};
pub use config::{
    BaseTrainingSection, DataSection, EvalSection, ExperimentConfig, FinetuneSection, ModelSection, PruningSection,
    SftSource, SEED_ENV,
};

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "prunelab", version, about = "Layer pruning and recovery for decoder-only transformers")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `model.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the report label.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Debug, Args, Default)]
struct Overrides {
    #[arg(long)]
    metric: Option<String>,
    /// `one-shot` or `iterative`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    total: Option<usize>,
    /// `none`, `lora[:rank]`, `partial:k`, `lm-head`, `full`.
    #[arg(long)]
    finetune: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Train a base model from `data.corpus`.
    TrainBase(Common),
    /// Score every block of the base model.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        metric: Option<String>,
    },
    /// Remove blocks without fine-tuning.
    Prune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
    },
    /// Recover a (pruned) checkpoint with the configured method.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        finetune: Option<String>,
    },
    /// Evaluate a checkpoint on the eval suite.
    Eval(Common),
    /// Score, prune, fine-tune and evaluate.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
    },
    /// Repeat the pipeline across a grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        /// `calibration-count`, `prune-rate` or `sft-dataset`.
        #[arg(long)]
        kind: String,
        /// Comma-separated grid values.
        #[arg(long)]
        grid: String,
    },
    /// Merge the reports of run directories into one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Greedy generation from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
    },
}

fn load(common: &Common, over: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(c) = &common.checkpoint {
        cfg.model.checkpoint = Some(c.clone());
    }
    if let Some(l) = &common.label {
        cfg.label = Some(l.clone());
    }
    let p = &mut cfg.pruning;
    if let Some(m) = &over.metric {
        p.metric = m.clone();
    }
    if let Some(s) = &over.strategy {
        p.strategy = s.clone();
    }
    if over.step.is_some() {
        p.step = over.step;
    }
    if let Some(t) = over.total {
        p.total = t;
    }
    if let Some(f) = &over.finetune {
        cfg.finetune.method = f.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(verb: Verb) -> Result<String> {
    let none = Overrides::default();
    match verb {
        Verb::TrainBase(c) => {
            let r = cmd_train_base(&load(&c, &none)?)?;
            Ok(format!(
                "trained {} steps, loss {:.4} -> {:.4}\ncheckpoint {}\n",
                r.steps,
                r.initial_loss.unwrap_or(f64::NAN),
                r.final_loss.unwrap_or(f64::NAN),
                r.checkpoint.display()
            ))
        }
        Verb::Score { common, metric } => {
            let over = Overrides {
                metric,
                ..Overrides::default()
            };
            Ok(cmd_score(&load(&common, &over)?)?.to_csv()?)
        }
        Verb::Prune { common, over } => {
            let r = cmd_prune(&load(&common, &over)?)?;
            Ok(format!("removed {:?}; {} layers remain\n", r.removed(), r.final_layers))
        }
        Verb::Finetune { common, finetune } => {
            let over = Overrides {
                finetune,
                ..Overrides::default()
            };
            let s = cmd_finetune(&load(&common, &over)?)?;
            Ok(format!(
                "{}: {} trainable, {} steps, loss {:.4} -> {:.4}\n",
                s.method,
                s.trainable,
                s.steps,
                s.initial_loss.unwrap_or(f64::NAN),
                s.final_loss.unwrap_or(f64::NAN)
            ))
        }
        Verb::Eval(c) => {
            let cfg = load(&c, &none)?;
            Ok(cmd_eval(&cfg, None)?.table())
        }
        Verb::Pipeline { common, over } => {
            let run = cmd_pipeline(&load(&common, &over)?)?;
            let mut out = format!("removed {:?}\n", run.record.removed());
            let rows: Vec<_> = run.baseline.iter().cloned().chain([run.report.clone()]).collect();
            out.push_str(&crate::evalkit::merge_reports(&rows)?);
            if let Some(a) = &run.report.alpha {
                out.push_str(&format!(
                    "alpha {}: accuracy {:.4} vs baseline {:.4} ({})\n",
                    a.alpha,
                    a.value,
                    a.baseline,
                    if a.within { "within" } else { "outside" }
                ));
            }
            Ok(out)
        }
        Verb::Sweep {
            common,
            over,
            kind,
            grid,
        } => {
            let cfg = load(&common, &over)?;
            Ok(cmd_sweep(&cfg, &parse_sweep(&kind, &grid)?)?.to_csv()?)
        }
        Verb::Report { runs } => cmd_report(&runs),
        Verb::Sample {
            common,
            prompt,
            tokens,
        } => {
            let cfg = load(&common, &none)?;
            Ok(format!("{prompt}{}\n", cmd_sample(&cfg, None, &prompt, tokens)?))
        }
    }
}

/// Exit code for an error: validation failures are distinguished from
/// failures while computing.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args` (program name first), runs the verb and returns the exit
/// code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match dispatch(cli.verb) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_are_validation() {
        assert_eq!(run(["prunelab", "pipeline"]), EXIT_VALIDATION);
        assert_eq!(run(["prunelab", "frobnicate"]), EXIT_VALIDATION);
    }

    #[test]
    fn missing_config_file_is_validation() {
        assert_eq!(run(["prunelab", "eval", "--config", "/nonexistent/x.toml"]), EXIT_VALIDATION);
    }

    #[test]
    fn report_needs_existing_runs() {
        assert_eq!(run(["prunelab", "report", "/nonexistent/run"]), EXIT_RUNTIME);
    }

    #[test]
    fn validation_error_exit_code() {
        assert_eq!(exit_code(&Error::config("seed", "missing")), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::NonFinite { op: "x" }), EXIT_RUNTIME);
    }
}
