//! Removes two blocks in one shot by block influence and compares perplexity
//! before and after.
//!
//! ```text
//! cargo run --release --example prune_one_shot
//! ```

mod common;

use prunelab::evalkit::perplexity;
use prunelab::metrics::Metric;
use prunelab::pruning::{one_shot_prune, CalibrationSource};

fn main() -> prunelab::Result<()> {
    common::init_logging();
    let tok = common::tokenizer();
    let model = common::base_model(&tok)?;
    let calib = common::calibration(&tok, 10, 0)?;
    let wiki = common::corpus("wiki_toy.txt", &tok)?;

    let (pruned, record) = one_shot_prune(&model, Metric::BlockInfluence, 2, CalibrationSource::Fixed(&calib))?;
    println!("removed {:?}, {} -> {} blocks", record.removed(), model.num_layers(), pruned.num_layers());
    println!(
        "wiki perplexity {:.3} -> {:.3}",
        perplexity(&model, &wiki, Some(64))?,
        perplexity(&pruned, &wiki, Some(64))?
    );
    Ok(())
}
