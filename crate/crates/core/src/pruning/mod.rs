//! Turning layer scores into removal plans and running one-shot or
//! iterative prune/recover pipelines.

mod pipeline;
mod plan;

pub use pipeline::{
    effective_step, iterative_prune, one_shot_prune, recover, run_pipeline, CalibrationSource, FinetuneMethod,
    FinetuneSummary, PipelineConfig, PipelineOutcome, PipelineRecord, RoundRecord,
};
pub use plan::{
    make_plan, relabel_indices, surviving_layers, PlanFingerprint, PruningObjective, PruningPlan, Strategy,
};
