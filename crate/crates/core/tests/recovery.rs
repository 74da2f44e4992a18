//! Adapter arithmetic and freeze soundness on the toy model.

mod common;

use common::*;
use prunelab::data::Tokenizer;
use prunelab::finetune::{adapter_trainable_count, attach_adapters, merge_adapters, train, FreezePolicy, TrainConfig};
use prunelab::model::{LanguageModel, MatrixRole, TokenBatch};
use prunelab::numeric::max_abs_diff;
use proptest::prelude::*;

#[test]
fn adapters_start_exact_and_merge_within_tolerance() {
    let c = adapter_merge_check(100, 7);
    assert_eq!(c.init_diff, 0.0);
    assert!(c.merge_diff < 1e-5, "{}", c.merge_diff);
}

#[test]
fn trained_adapters_merge_and_leave_base_frozen() {
    let tok = Tokenizer::printable_ascii();
    let model = toy::<f32>(tok.vocab_size(), 2);
    let frozen = model.clone();
    let examples: Vec<_> = alpaca_examples(&tok, 128).into_iter().take(16).collect();
    let mut adapted = attach_adapters(model, &[MatrixRole::Q, MatrixRole::V], 4, 16.0, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        lr: 1e-2,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let out = train(&mut adapted, &examples, &cfg).unwrap();
    assert!(out.gradient_keys.iter().all(|k| k.starts_with("adapters.")));
    assert_eq!(adapted.base.fingerprint(), frozen.fingerprint());
    let batch = TokenBatch::single(&examples[0].tokens).unwrap();
    let want = adapted.logits(&batch).unwrap();
    let merged = merge_adapters(adapted).unwrap();
    assert!(max_abs_diff(&merged.forward(&batch).unwrap(), &want) < 1e-5);
    assert_ne!(merged.fingerprint(), frozen.fingerprint());
}

#[test]
fn partial_training_touches_only_policy_tensors() {
    for k in 1..=3 {
        let c = freeze_check(k, k as u64);
        assert!(c.changed_frozen.is_empty(), "k={k}: {:?}", c.changed_frozen);
        assert!(c.unchanged_trainable.is_empty(), "k={k}: {:?}", c.unchanged_trainable);
        assert!(c.gradient_keys_match && c.tied_rejected);
    }
}

#[test]
fn out_of_window_policies_rejected() {
    assert!(FreezePolicy::parse("partial:4").is_err());
    assert!(FreezePolicy::parse("lm-head+last-7").is_err());
    assert_eq!(FreezePolicy::parse("partial:0").unwrap(), FreezePolicy::LmHeadOnly);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Attached adapter parameters equal the closed-form count.
    #[test]
    fn adapter_count_formula(rank in 1usize..9, mask in 1u8..128) {
        let targets: Vec<MatrixRole> = MatrixRole::ALL
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &r)| r)
            .collect();
        let model = toy::<f32>(20, 0);
        let spec = model.spec().clone();
        let adapted = attach_adapters(model, &targets, rank, 16.0, 0).unwrap();
        let by_hand: usize = targets
            .iter()
            .map(|r| {
                let (o, i) = r.dims(&spec);
                rank * (o + i) * spec.layers
            })
            .sum();
        prop_assert_eq!(adapted.adapters.num_params(), by_hand);
        prop_assert_eq!(adapter_trainable_count(&spec, &targets, rank), by_hand as u64);
    }
}
