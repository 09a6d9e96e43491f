//! Random-projection quantizer, multi-softmax loss and masking.

mod common;

use common::*;
use proptest::prelude::*;

use usm_core::bestrq::{apply_mask, bestrq_loss, MaskSpec, QuantizedTargets, RandomQuantizer};
use usm_core::encoder::Linear;
use usm_core::numerics::{Binder, Graph, ParamStore, Tensor};

fn frames(rows: usize, cols: usize, seed: u64) -> Tensor {
    random_tensor(rows, cols, seed)
}

#[test]
fn codes_are_invariant_to_positive_scale_on_1000_frames() {
    let q = RandomQuantizer::new(12, 4, 16, 3, 1).unwrap();
    let x = frames(1000, 12, 2);
    assert_eq!(scale_violations(&q, &x, &[1e-3, 0.5, 2.0, 7.25, 1e4]), 0);
}

#[test]
fn codes_match_brute_force_cosine_argmax() {
    let q = RandomQuantizer::new(6, 3, 8, 2, 3).unwrap();
    let x = frames(200, 6, 4);
    let got = q.quantize(&x).unwrap().labels;
    let p = q.projection();
    let (d, c) = (q.embedding_dim(), q.codebook_size());
    for t in 0..x.rows() {
        let proj: Vec<f64> = (0..d).map(|k| (0..6).map(|i| x.data()[t * 6 + i] * p.data()[i * d + k]).sum()).collect();
        let pn = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
        for n in 0..q.num_codebooks() {
            let cos = |j: usize| {
                let v = &q.codebooks()[(n * c + j) * d..(n * c + j + 1) * d];
                let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>() / (vn * pn)
            };
            let best = (0..c).fold(0, |a, j| if cos(j) > cos(a) { j } else { a });
            assert_eq!(got[n][t], best, "frame {t} book {n}");
        }
    }
}

#[test]
fn zero_frame_is_degenerate() {
    let q = RandomQuantizer::new(4, 2, 4, 2, 5).unwrap();
    let out = q.quantize(&Tensor::zeros(vec![3, 4])).unwrap();
    assert_eq!(out.degenerate_frames, 3);
    assert!(out.labels.iter().flatten().all(|&l| l == 0));
}

#[test]
fn quantizer_round_trips_through_store() {
    let q = RandomQuantizer::new(8, 4, 16, 2, 9).unwrap();
    let back = RandomQuantizer::from_store(&q.to_store()).unwrap();
    assert_eq!(back.checksum(), q.checksum());
    assert_eq!(RandomQuantizer::new(8, 4, 16, 2, 9).unwrap().checksum(), q.checksum());
    assert_ne!(RandomQuantizer::new(8, 4, 16, 2, 10).unwrap().checksum(), q.checksum());
}

#[test]
fn multi_softmax_is_mean_of_codebook_losses() {
    for seed in 0..20 {
        assert!(multi_softmax_gap(seed) < 1e-12);
    }
}

#[test]
fn uniform_logits_give_log_codebook_size() {
    let c = 16;
    let mut store = ParamStore::new();
    let heads: Vec<Linear> = (0..3).map(|n| Linear::zeros(&mut store, &format!("h{n}"), 5, c)).collect();
    let targets = QuantizedTargets {
        labels: vec![vec![3; 8], vec![0; 8], vec![15; 8]],
        mask_indices: vec![1, 4, 5],
        degenerate_frames: 0,
    };
    let g = Graph::<f64>::new();
    let b = Binder::frozen(&g, &store);
    let out = bestrq_loss(&b, &heads, b.constant(random_tensor(8, 5, 1)), &targets).unwrap();
    assert!((out.loss.item() - (c as f64).ln()).abs() < 1e-12);
    assert_eq!(out.masked_frames, 3);
}

#[test]
fn no_masked_frames_gives_zero_loss() {
    let (store, heads, mut targets) = heads_and_targets(2, 4, 6, 3);
    targets.mask_indices.clear();
    let g = Graph::<f64>::new();
    let b = Binder::frozen(&g, &store);
    let out = bestrq_loss(&b, &heads, b.constant(random_tensor(6, 5, 2)), &targets).unwrap();
    assert_eq!(out.loss.item(), 0.0);
    assert_eq!(out.masked_frames, 0);
}

#[test]
fn coverage_over_100_seeds_tracks_expectation() {
    let spec = MaskSpec::default();
    assert_eq!(spec.span_frames(), 40);
    let expected = spec.expected_coverage();
    let got = empirical_coverage(&spec, 2000, 100);
    assert!((got / expected - 1.0).abs() < 0.2, "got {got}, expected {expected}");
}

#[test]
fn masked_frames_are_replaced_and_others_kept() {
    let feats = noise_features(300, 4);
    let spec = MaskSpec {
        start_probability: 0.05,
        ..MaskSpec::default()
    }
    .with_seed(8);
    let (masked, idx) = apply_mask(&feats, &spec).unwrap();
    let d = feats.dims();
    for t in 0..feats.num_frames {
        let same = masked.frames[t * d..(t + 1) * d] == feats.frames[t * d..(t + 1) * d];
        assert_eq!(same, !idx.contains(&t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scale_invariance_holds_for_any_positive_scale(seed in any::<u64>(), s in 1e-6f64..1e6) {
        let q = RandomQuantizer::new(8, 4, 8, 2, seed).unwrap();
        prop_assert_eq!(scale_violations(&q, &frames(20, 8, seed ^ 1), &[s]), 0);
    }

    #[test]
    fn labels_are_in_range(seed in any::<u64>()) {
        let q = RandomQuantizer::new(5, 3, 7, 3, seed).unwrap();
        let out = q.quantize(&frames(15, 5, seed)).unwrap();
        prop_assert!(out.labels.iter().flatten().all(|&l| l < 7));
    }

    #[test]
    fn mask_is_deterministic_per_seed(seed in any::<u64>()) {
        let feats = noise_features(100, 1);
        let spec = MaskSpec { start_probability: 0.1, ..MaskSpec::default() }.with_seed(seed);
        prop_assert_eq!(apply_mask(&feats, &spec).unwrap(), apply_mask(&feats, &spec).unwrap());
    }
}
