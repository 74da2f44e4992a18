//! Perplexity, multiple-choice accuracy, reports and sensitivity sweeps.

mod perplexity;
mod report;
mod sweep;
mod zero_shot;

pub use perplexity::{nll_sum, perplexity, sequence_perplexity};
pub use report::{build_report, memory_estimate, merge_reports, AlphaFlag, EvalReport, EvalSuite, TaskAccuracy, REPORT_SEQ};
pub use sweep::{sensitivity_sweep, SweepBase, SweepKind, SweepPoint, SweepReport};
pub use zero_shot::{binomial_stderr, zero_shot_eval, ChoiceNormalization, ChoiceScore, TaskResult};
