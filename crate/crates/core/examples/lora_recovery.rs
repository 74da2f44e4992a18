//! Prunes two blocks, recovers with rank-8 adapters on every projection and
//! merges them back into the weights.
//!
//! ```text
//! cargo run --release --example lora_recovery
//! ```

mod common;

use prunelab::evalkit::perplexity;
use prunelab::finetune::{adapter_trainable_count, DEFAULT_ALPHA, DEFAULT_TARGETS};
use prunelab::metrics::Metric;
use prunelab::pruning::{one_shot_prune, recover, CalibrationSource, FinetuneMethod};

fn main() -> prunelab::Result<()> {
    common::init_logging();
    let tok = common::tokenizer();
    let model = common::base_model(&tok)?;
    let wiki = common::corpus("wiki_toy.txt", &tok)?;
    let (pruned, record) = one_shot_prune(&model, Metric::ReverseOrder, 2, CalibrationSource::None)?;
    let before = perplexity(&pruned, &wiki, Some(64))?;

    let method = FinetuneMethod::Lora {
        rank: 8,
        alpha: DEFAULT_ALPHA,
        targets: DEFAULT_TARGETS.to_vec(),
    };
    println!(
        "removed {:?}; adapters add {} trainable scalars",
        record.removed(),
        adapter_trainable_count(pruned.spec(), &DEFAULT_TARGETS, 8)
    );
    let (merged, summary) = recover(pruned, &method, &common::recovery_config(), &common::sft(&tok)?, false)?;
    let s = summary.expect("lora trains");
    println!("{} steps, loss {:.3} -> {:.3}", s.steps, s.initial_loss.unwrap_or(f64::NAN), s.final_loss.unwrap_or(f64::NAN));
    println!("wiki perplexity {before:.3} -> {:.3} after merge", perplexity(&merged, &wiki, Some(64))?);
    Ok(())
}
