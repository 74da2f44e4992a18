//! Sweeps the calibration-set size for block influence and prints the CSV.
//!
//! ```text
//! cargo run --release --example sweep
//! ```

mod common;

use prunelab::evalkit::{sensitivity_sweep, SweepBase, SweepKind};
use prunelab::metrics::Metric;
use prunelab::pruning::{PipelineConfig, PruningObjective};

fn main() -> prunelab::Result<()> {
    common::init_logging();
    let tok = common::tokenizer();
    let model = common::base_model(&tok)?;
    let suite = common::suite(&tok)?;
    let wiki = common::corpus("wiki_toy.txt", &tok)?;
    let base = SweepBase {
        model: &model,
        tokenizer: &tok,
        pipeline: PipelineConfig::new(PruningObjective::one_shot(Metric::BlockInfluence, 2)),
        calibration_corpus: &wiki,
        calibration_count: 10,
        calibration_seq_len: 64,
        calibration_seed: 0,
        reuse_calibration: false,
        sft: Vec::new(),
        suite: &suite,
    };
    let report = sensitivity_sweep(&base, &SweepKind::CalibrationCount(vec![1, 5, 10, 30]))?;
    print!("{}", report.to_csv()?);
    Ok(())
}
