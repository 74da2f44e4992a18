//! Scores every block of the toy base model with all seven metrics and
//! prints the order in which each would remove them.
//!
//! ```text
//! cargo run --release --example score_layers
//! ```

mod common;

use prunelab::metrics::{score_layers, Metric};

fn main() -> prunelab::Result<()> {
    common::init_logging();
    let tok = common::tokenizer();
    let model = common::base_model(&tok)?;
    let calib = common::calibration(&tok, 10, 0)?;
    for metric in Metric::all(0) {
        let s = score_layers(&model, metric, Some(&calib))?;
        let scores: Vec<String> = s.scores.iter().map(|v| format!("{v:.4}")).collect();
        println!("{:<14} order {:?}  scores [{}]", metric.name(), s.prune_order(), scores.join(", "));
    }
    Ok(())
}
