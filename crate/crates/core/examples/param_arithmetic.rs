//! Parameter, MAC, memory and trainable-count arithmetic for the 8B-class
//! preset, dense and with eight blocks removed.
//!
//! ```text
//! cargo run --example param_arithmetic
//! ```

use prunelab::evalkit::memory_estimate;
use prunelab::finetune::{adapter_trainable_count, FreezePolicy, DEFAULT_TARGETS};
use prunelab::model::{preset_names, TransformerSpec};

fn main() -> prunelab::Result<()> {
    println!("presets: {:?}", preset_names());
    let dense = TransformerSpec::preset("llama-3.1-8b-like")?;
    for spec in [dense.clone(), dense.with_layers(dense.layers - 8)] {
        let g = |x: u64| x as f64 / 1e9;
        println!(
            "{} blocks: {:.3}B params, {:.2}G MACs at 64 tokens, {:.2} GB at fp16",
            spec.layers,
            g(spec.count_params().unique),
            g(spec.count_macs(64)),
            g(memory_estimate(&spec, 64, 2))
        );
    }
    let pruned = dense.with_layers(24);
    println!("lora r=8, all projections: {}", adapter_trainable_count(&pruned, &DEFAULT_TARGETS, 8));
    for policy in [FreezePolicy::LmHeadOnly, FreezePolicy::LmHeadPlusLast(1), FreezePolicy::LmHeadPlusLast(2), FreezePolicy::LmHeadPlusLast(3)] {
        println!("{policy}: {}", policy.trainable_count(&pruned));
    }
    Ok(())
}
