//! Prunes two blocks and recovers by training only the lm-head and the last
//! k blocks, for k = 1, 2, 3.
//!
//! ```text
//! cargo run --release --example partial_recovery
//! ```

mod common;

use prunelab::evalkit::perplexity;
use prunelab::finetune::FreezePolicy;
use prunelab::metrics::Metric;
use prunelab::pruning::{one_shot_prune, recover, CalibrationSource, FinetuneMethod};

fn main() -> prunelab::Result<()> {
    common::init_logging();
    let tok = common::tokenizer();
    let model = common::base_model(&tok)?;
    let wiki = common::corpus("wiki_toy.txt", &tok)?;
    let sft = common::sft(&tok)?;
    let (pruned, _) = one_shot_prune(&model, Metric::ReverseOrder, 2, CalibrationSource::None)?;
    println!("pruned: wiki perplexity {:.3}", perplexity(&pruned, &wiki, Some(64))?);
    for k in 1..=3 {
        let policy = FreezePolicy::LmHeadPlusLast(k);
        let method = FinetuneMethod::Partial { policy };
        let (m, s) = recover(pruned.clone(), &method, &common::recovery_config(), &sft, false)?;
        println!(
            "{policy}: {} trainable, wiki perplexity {:.3}",
            s.map_or(0, |s| s.trainable),
            perplexity(&m, &wiki, Some(64))?
        );
    }
    Ok(())
}
