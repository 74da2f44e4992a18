//! Removes three blocks one at a time by Taylor score, rescoring on fresh
//! calibration windows each round.
//!
//! ```text
//! cargo run --release --example prune_iterative
//! ```

mod common;

use prunelab::metrics::Metric;
use prunelab::pruning::{iterative_prune, CalibrationSource, FinetuneMethod};

fn main() -> prunelab::Result<()> {
    common::init_logging();
    let tok = common::tokenizer();
    let model = common::base_model(&tok)?;
    let wiki = common::corpus("wiki_toy.txt", &tok)?;
    let calibration = CalibrationSource::Corpus {
        corpus: &wiki,
        count: 10,
        seq_len: 64,
        seed: 0,
        reuse: false,
    };
    let out = iterative_prune(
        &model,
        Metric::Taylor,
        1,
        3,
        calibration,
        FinetuneMethod::None,
        common::recovery_config(),
        &[],
    );
    for r in &out.record.rounds {
        println!(
            "round {}: removed {:?} (local {:?}), {} blocks left, calibration ppl {:.3}",
            r.round,
            r.removed,
            r.removed_local,
            r.layers_after,
            r.ppl_pruned.unwrap_or(f64::NAN)
        );
    }
    println!("removed (original indices) {:?}", out.record.removed());
    println!("final blocks {}", out.model?.num_layers());
    Ok(())
}
