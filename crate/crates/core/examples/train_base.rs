//! Trains the 8-block toy model on the shipped corpus and reports perplexity
//! and task accuracy before and after.
//!
//! ```text
//! cargo run --release --example train_base -- [steps]
//! ```

use std::path::Path;
use std::time::Instant;

use prunelab::data::{load_eval_task, Corpus, Tokenizer};
use prunelab::evalkit::{perplexity, zero_shot_eval, ChoiceNormalization};
use prunelab::finetune::{pretrain, BaseTrainConfig};
use prunelab::model::{TransformerModel, TransformerSpec};

fn main() -> prunelab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps = std::env::args().nth(1).map_or(600, |s| s.parse().expect("steps"));
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let tok = Tokenizer::printable_ascii();
    let train = Corpus::load(&data.join("toy_corpus.txt"))?.tokenize(&tok)?;
    let wiki = Corpus::load(&data.join("wiki_toy.txt"))?.tokenize(&tok)?;
    let facts = load_eval_task(&data.join("tasks/facts.jsonl"))?;

    let spec = TransformerSpec::preset("toy-8x64")?.with_vocab(tok.vocab_size());
    let mut model = TransformerModel::<f32>::new(spec, 0)?;
    let before = perplexity(&model, &wiki, None)?;

    let cfg = BaseTrainConfig {
        steps,
        ..BaseTrainConfig::default()
    };
    let t = Instant::now();
    let outcome = pretrain(&mut model, &train, &cfg)?;
    let secs = t.elapsed().as_secs_f64();

    let after = perplexity(&model, &wiki, None)?;
    let acc = zero_shot_eval(&model, &tok, &facts, ChoiceNormalization::Sum)?;
    println!("trained {steps} steps in {secs:.1}s");
    println!(
        "loss {:.3} -> {:.3}",
        outcome.initial_loss().unwrap_or(f64::NAN),
        outcome.final_loss().unwrap_or(f64::NAN)
    );
    println!("wiki perplexity {before:.2} -> {after:.2}");
    println!("facts accuracy {:.3} ± {:.3}", acc.accuracy, acc.stderr);
    Ok(())
}
