//! Joint speech and text pre-training: stop-gradient, gate and weighting.

mod common;

use common::*;

use usm_core::most::{curriculum_gate, most_total, MostBatch, MostLossWeights, MostTerm, TEXT_PREFIX};
use usm_core::numerics::{Binder, Graph};

fn batch() -> MostBatch {
    MostBatch {
        unlabeled_speech: vec![noise_features(32, 1), noise_features(40, 2)],
        paired: vec![(noise_features(48, 3), labels("ab c")), (noise_features(40, 4), labels("da"))],
        unlabeled_text: vec![labels("abc"), labels("b dd")],
    }
}

#[test]
fn consistency_leaves_speech_encoder_gradients_exactly_zero() {
    for seed in [1, 2, 3] {
        let (leaks, checked) = consistency_speech_leaks(seed);
        assert!(checked > 0);
        assert!(leaks.is_empty(), "{leaks:?}");
    }
}

#[test]
fn consistency_still_trains_the_text_encoder() {
    let (m, store) = tiny_most(4);
    let g = Graph::<f64>::new();
    let b = Binder::new(&g, &store);
    let loss = m.consistency_loss(&b, &noise_features(40, 1), &labels("ab")).unwrap().unwrap();
    let grads = b.grads(&g.backward(loss).unwrap());
    assert!(!grads.is_zero(store.id(&format!("{TEXT_PREFIX}.embedding")).unwrap()));
}

#[test]
fn empty_transcript_is_skipped() {
    let (m, store) = tiny_most(5);
    let g = Graph::<f64>::new();
    let b = Binder::new(&g, &store);
    assert!(m.consistency_loss(&b, &noise_features(16, 1), &labels("")).unwrap().is_none());
    assert!(m.text_reconstruction_loss(&b, &labels(""), 1).unwrap().is_none());
}

#[test]
fn reconstruction_is_gated_off_before_the_gate() {
    let (m, store) = tiny_most(6);
    let gate = curriculum_gate(100);
    assert_eq!(gate, 17);
    let before = m.step(&store, &batch(), gate - 1, gate, 9).unwrap();
    assert_eq!(before.loss(MostTerm::Reconstruction), 0.0);
    let text_ids: Vec<_> = store.iter().filter(|(_, n, _)| n.starts_with(TEXT_PREFIX)).map(|(id, _, _)| id).collect();
    let recon = &before.term_grads[MostTerm::Reconstruction as usize];
    assert!(store.ids().all(|id| recon.is_zero(id)));
    let after = m.step(&store, &batch(), gate, gate, 9).unwrap();
    assert!(after.loss(MostTerm::Reconstruction) > 0.0);
    assert!(text_ids.iter().any(|&id| !after.term_grads[MostTerm::Reconstruction as usize].is_zero(id)));
    assert!(before.missing.is_empty() && after.missing.is_empty());
}

#[test]
fn total_is_the_weighted_sum_of_components() {
    let (mut m, store) = tiny_most(7);
    let out = m.step(&store, &batch(), 50, 10, 3).unwrap();
    let sum: f64 = out.losses.iter().sum();
    assert!((out.total - sum).abs() < 1e-12);
    assert!(out.losses.iter().all(|&l| l > 0.0));
    m.weights = MostLossWeights {
        bestrq: 0.0,
        asr: 1.0,
        consistency: 0.0,
        reconstruction: 0.0,
    };
    let only = m.step(&store, &batch(), 50, 10, 3).unwrap();
    assert_eq!(only.total, only.loss(MostTerm::Asr));
    assert_eq!(most_total(&out.losses, &m.weights, true), out.loss(MostTerm::Asr));
}

#[test]
fn missing_sub_batch_is_flagged() {
    let (m, store) = tiny_most(8);
    let b = MostBatch {
        unlabeled_text: Vec::new(),
        ..batch()
    };
    let out = m.step(&store, &b, 50, 10, 3).unwrap();
    assert_eq!(out.missing, vec![MostTerm::Reconstruction]);
    assert_eq!(out.loss(MostTerm::Reconstruction), 0.0);
}

#[test]
fn full_text_mask_hides_the_text_encoding() {
    let (mut m, mut store) = tiny_most(9);
    m.text_mask.start_probability = 1.0;
    let text = labels("ab cd");
    let run = |store: &usm_core::numerics::ParamStore| {
        let g = Graph::<f64>::new();
        let b = Binder::new(&g, store);
        let loss = m.text_reconstruction_loss(&b, &text, 21).unwrap().unwrap();
        let grads = b.grads(&g.backward(loss).unwrap());
        let text_zero = store.iter().filter(|(_, n, _)| n.starts_with(TEXT_PREFIX)).all(|(id, _, _)| grads.is_zero(id));
        (loss.item(), text_zero)
    };
    let (a, zero) = run(&store);
    assert!(zero);
    randomize(&mut store, |n| n.starts_with(TEXT_PREFIX), 77);
    let (b, _) = run(&store);
    assert_eq!(a, b);
}

#[test]
fn step_is_deterministic() {
    let (m, store) = tiny_most(10);
    let a = m.step(&store, &batch(), 30, 10, 5).unwrap();
    let b = m.step(&store, &batch(), 30, 10, 5).unwrap();
    assert_eq!(a.losses, b.losses);
    assert!(store.ids().all(|id| a.grads.get(id) == b.grads.get(id)));
}
