//! Saves a pruned model, reloads it and checks the weights are bit-identical.
//!
//! ```text
//! cargo run --release --example checkpoint_roundtrip
//! ```

mod common;

use prunelab::model::{load_checkpoint, save_checkpoint, TrainingMetadata};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    common::init_logging();
    let tok = common::tokenizer();
    let model = common::base_model(&tok)?.remove_layers(&[2, 5])?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("pruned.ckpt");
    let meta = TrainingMetadata {
        seed: 0,
        step: 1,
        dataset_fingerprint: Some(tok.fingerprint()),
    };
    save_checkpoint(&model, &meta, &path)?;
    let back = load_checkpoint::<f32>(&path)?;
    println!("{} bytes, {} blocks", std::fs::metadata(&path)?.len(), back.model.num_layers());
    println!("fingerprint {} -> {}", model.fingerprint(), back.model.fingerprint());
    assert_eq!(model.fingerprint(), back.model.fingerprint());
    assert_eq!(meta, back.metadata);
    Ok(())
}
