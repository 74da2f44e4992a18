//! Importance metrics against independent implementations.

mod common;

use common::*;
use prunelab::data::CalibrationSet;
use prunelab::metrics::{
    bi_scores, block_influence, magnitude_scores, ppl_scores, score_layers, taylor_scores, Metric,
};
use prunelab::model::{MatrixRole, TransformerModel};
use prunelab::numeric::{SeededRng, Tensor};
use proptest::prelude::*;

fn micro_calibration(seed: u64) -> CalibrationSet {
    let mut rng = SeededRng::new(seed);
    let seqs = [6usize, 6, 4]
        .iter()
        .map(|&len| (0..len).map(|_| rng.below(4) as u32).collect())
        .collect();
    CalibrationSet::new(seqs, 6, "micro", seed).unwrap()
}

#[test]
fn micro_model_is_small_enough() {
    let m = TransformerModel::<f64>::new(micro_spec(), 0).unwrap();
    assert!(m.num_params() <= 100, "{}", m.num_params());
}

#[test]
fn taylor_matches_finite_differences() {
    for seed in 0..3 {
        let model = TransformerModel::<f64>::new(micro_spec(), seed).unwrap();
        let calib = micro_calibration(seed + 10);
        let got = taylor_scores(&model, &calib).unwrap().scores;
        let want = taylor_by_finite_differences(&model, &calib, 1e-5);
        for (g, w) in got.iter().zip(&want) {
            assert!(rel_err(*g, *w) < 1e-3, "seed {seed}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn bi_matches_double_loop_on_toy() {
    let model = toy::<f64>(100, 3);
    let calib = wiki_calibration(6, 24, 1);
    let got = bi_scores(&model, &calib).unwrap().scores;
    let want = naive_block_influence(&model, &calib);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-6, "{got:?} vs {want:?}");
    }
}

fn stream(rows: &[&[f64]]) -> Tensor<f64> {
    let cols = rows[0].len();
    Tensor::from_f64([rows.len(), cols], &rows.concat()).unwrap()
}

#[test]
fn bi_hand_cases() {
    let x = stream(&[&[1.0, 2.0], &[-3.0, 0.5]]);
    let neg = stream(&[&[-1.0, -2.0], &[3.0, -0.5]]);
    let orth = stream(&[&[-2.0, 1.0], &[0.5, 3.0]]);
    let sixty = stream(&[&[1.0, 0.0]]);
    let sixty_out = stream(&[&[0.5, 3f64.sqrt() / 2.0]]);
    assert_eq!(block_influence(&[vec![x.clone(), x.clone()]]).unwrap(), vec![0.0]);
    assert_eq!(block_influence(&[vec![x.clone(), neg]]).unwrap(), vec![2.0]);
    assert_eq!(block_influence(&[vec![x, orth]]).unwrap(), vec![1.0]);
    let half = block_influence(&[vec![sixty, sixty_out]]).unwrap()[0];
    assert!((half - 0.5).abs() < 1e-15, "{half}");
}

/// Zeroing the output projections turns a block into the identity.
fn make_identity(model: &mut TransformerModel<f64>, i: usize) {
    for role in [MatrixRole::O, MatrixRole::Down] {
        model.layer_mut(i).matrix_mut(role).data_mut().fill(0.0);
    }
}

#[test]
fn identity_layer_costs_nothing_under_ppl() {
    let mut model = toy::<f64>(100, 5);
    make_identity(&mut model, 2);
    make_identity(&mut model, 6);
    let calib = wiki_calibration(4, 32, 2);
    let s = ppl_scores(&model, &calib).unwrap();
    let base = s.baseline.unwrap();
    assert_eq!(s.scores[2], base);
    assert_eq!(s.scores[6], base);
    assert_eq!(s.bottom_k(2).unwrap(), vec![2, 6]);
    // BI of an identity block is exactly zero too.
    let bi = bi_scores(&model, &calib).unwrap().scores;
    assert!(bi[2].abs() < 1e-12 && bi[6].abs() < 1e-12, "{bi:?}");
}

#[test]
fn magnitude_by_hand() {
    let model = toy::<f32>(20, 1);
    let l1 = magnitude_scores(&model, 1).unwrap().scores;
    let l2 = magnitude_scores(&model, 2).unwrap().scores;
    for i in 0..model.num_layers() {
        let mut a = 0.0;
        let mut b = 0.0;
        for role in MatrixRole::ALL {
            let d = model.layer(i).matrix(role).data();
            a += d.iter().map(|v| v.abs() as f64).sum::<f64>();
            b += d.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        }
        assert!(rel_err(l1[i], a) < 1e-9 && rel_err(l2[i], b) < 1e-9);
    }
}

#[test]
fn data_free_metrics_ignore_calibration_and_data_metrics_demand_it() {
    let model = toy::<f32>(100, 0);
    for m in Metric::all(3) {
        let r = score_layers(&model, m, None);
        assert_eq!(r.is_err(), m.needs_calibration(), "{m}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// BI is invariant to positive rescaling of either stream and stays in [0, 2].
    #[test]
    fn bi_scale_invariant(data in prop::collection::vec(-5.0f64..5.0, 12), s in 0.1f64..10.0) {
        let a = Tensor::from_f64([3, 4], &data).unwrap();
        let b = Tensor::from_f64([3, 4], &data.iter().rev().cloned().collect::<Vec<_>>()).unwrap();
        let base = block_influence(&[vec![a.clone(), b.clone()]]).unwrap()[0];
        let scaled = block_influence(&[vec![a.scale(s).unwrap(), b]]).unwrap()[0];
        prop_assert!((base - scaled).abs() < 1e-9);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&base));
    }
}
