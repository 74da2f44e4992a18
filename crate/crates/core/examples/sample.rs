//! Greedy continuation of a prompt from the dense and the pruned model.
//!
//! ```text
//! cargo run --release --example sample -- "the fox eats"
//! ```

mod common;

use prunelab::data::BOS;

fn main() -> prunelab::Result<()> {
    common::init_logging();
    let prompt = std::env::args().nth(1).unwrap_or_else(|| "the owl lives in".into());
    let tok = common::tokenizer();
    let model = common::base_model(&tok)?;
    let pruned = model.remove_layers(&[6, 7])?;
    let mut ids = vec![BOS];
    ids.extend(tok.encode(&prompt)?);
    for (name, m) in [("dense", &model), ("pruned", &pruned)] {
        let out = m.greedy_generate(&ids, 40)?;
        println!("{name:>6}: {prompt}{}", tok.decode(&out[ids.len()..])?);
    }
    Ok(())
}
