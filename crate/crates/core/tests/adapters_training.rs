//! Residual adapters: frozen base, per-language selection and training.

mod common;

use common::*;

use usm_core::adapters::{AdapterConfig, DEFAULT_ADAPTER_RATIO};
use usm_core::encoder::ConformerConfig;
use usm_core::numerics::{Binder, Graph};

#[test]
fn adapter_training_halves_the_loss_and_keeps_the_base() {
    let (out, first, last) = adapter_run(1);
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
    assert_eq!(out.base_checksum_before, out.base_checksum_after);
    let trained = out.stage.checkpoint.params();
    let up = trained
        .iter()
        .filter(|(_, n, _)| n.starts_with("adapters.en.") && n.contains(".up."))
        .all(|(_, _, t)| t.data().iter().all(|&v| v == 0.0));
    assert!(up, "untrained language's adapters moved");
}

#[test]
fn only_selected_adapters_get_gradients() {
    for seed in [3, 4] {
        let leaks = adapter_gradient_leaks(seed);
        assert!(leaks.is_empty(), "{leaks:?}");
    }
}

#[test]
fn zero_initialised_adapters_are_an_exact_identity() {
    assert!(zero_adapters_are_identity(5));
}

#[test]
fn selection_is_stateless() {
    let (model, bank, mut store, pattern) = tiny_adapted(6);
    randomize(&mut store, |n| n.starts_with("adapters."), 7);
    let feats = noise_features(36, 8);
    let run = |lang: &str| {
        let g = Graph::<f64>::new();
        let b = Binder::frozen(&g, &store);
        model.log_probs(&b, &feats, pattern, Some(bank.select(lang).unwrap())).unwrap().value()
    };
    let a1 = run("a");
    let b = run("b");
    let a2 = run("a");
    assert_eq!(a1, a2);
    assert_ne!(a1, b);
    assert!(bank.select("zz").unwrap_err().to_string().contains("a, b"));
}

#[test]
fn default_budget_is_about_two_percent() {
    for model in [ConformerConfig::default(), ConformerConfig::conformer_0_6b(), ConformerConfig::conformer_2b()] {
        let cfg = AdapterConfig::for_ratio(&model, DEFAULT_ADAPTER_RATIO);
        let ratio = usm_core::adapters::adapter_param_count(&model, cfg.bottleneck_dim) as f64 / model.param_count() as f64;
        assert!((0.020..=0.026).contains(&ratio), "{ratio}");
    }
}
