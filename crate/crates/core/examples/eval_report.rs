//! Evaluates the base model and a pruned copy on the full suite and prints
//! both as one merged table.
//!
//! ```text
//! cargo run --release --example eval_report
//! ```

mod common;

use prunelab::evalkit::{build_report, merge_reports};
use prunelab::metrics::Metric;
use prunelab::pruning::{one_shot_prune, CalibrationSource};

fn main() -> prunelab::Result<()> {
    common::init_logging();
    let tok = common::tokenizer();
    let model = common::base_model(&tok)?;
    let suite = common::suite(&tok)?;
    let (pruned, _) = one_shot_prune(&model, Metric::MagnitudeL2, 2, CalibrationSource::None)?;
    let reports = vec![
        build_report(&model, &tok, &suite, "dense")?,
        build_report(&pruned, &tok, &suite, "magnitude-l2 -2")?,
    ];
    print!("{}", merge_reports(&reports)?);
    println!("{}", reports[1].to_json());
    Ok(())
}
