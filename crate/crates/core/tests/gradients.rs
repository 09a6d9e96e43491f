//! Finite-difference checks of the autodiff engine and every trainable
//! module.

mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;

use usm_core::ctc::{ctc_loss_var, LabelSequence};
use usm_core::numerics::{grad_check, Binder, Graph, ParamStore, Tensor, TensorError};

const TOL: f64 = 1e-5;

#[test]
fn every_trainable_module_passes() {
    for (name, report) in gradient_suite() {
        assert!(report.non_finite_probes.is_empty(), "{name}: {report:?}");
        assert!(report.max_relative_error < TOL, "{name}: worst {:?}", report.worst());
    }
}

#[test]
fn softmax_cross_entropy_layer() {
    let mut store = ParamStore::new();
    let w = store.insert("w", random_tensor(5, 4, 1));
    let bias = store.insert("b", Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]));
    let x = random_tensor(6, 5, 2);
    let targets = [0usize, 3, 1, 2, 2, 0];
    let r = grad_check(
        |b| {
            let logits = b.constant(x.clone()).matmul(b.get(w))?.add_row(b.get(bias))?;
            Ok::<_, TensorError>(logits.log_softmax().pick_cols(&targets)?.mean().scale(-1.0))
        },
        &store,
        FD_STEP,
    )
    .unwrap();
    assert!(r.max_relative_error < 1e-6, "{r:?}");
}

#[test]
fn ctc_loss_four_frames_two_labels() {
    let mut store = ParamStore::new();
    let logits = store.insert("logits", random_tensor(4, 3, 3));
    let target = LabelSequence::new(vec![1, 2]);
    let r = grad_check(
        |b| Ok::<_, usm_core::Error>(ctc_loss_var(b.get(logits).log_softmax(), &target)?.expect("feasible")),
        &store,
        FD_STEP,
    )
    .unwrap();
    assert!(r.max_relative_error < TOL, "{r:?}");
}

fn mlp_store(seed: u64, dims: &[usize]) -> ParamStore {
    let mut store = ParamStore::new();
    for (i, w) in dims.windows(2).enumerate() {
        store.insert(format!("w{i}"), random_tensor(w[0], w[1], seed + i as u64));
        store.insert(format!("b{i}"), random_tensor(1, w[1], seed + 100 + i as u64).reshape(vec![w[1]]).unwrap());
    }
    store
}

fn mlp<'g>(b: &Binder<'g, '_, f64>, x: &Tensor, layers: usize) -> Result<usm_core::numerics::Var<'g, f64>, TensorError> {
    let s = b.store();
    let mut h = b.constant(x.clone());
    for i in 0..layers {
        h = h.matmul(b.get(s.id(&format!("w{i}"))?))?.add_row(b.get(s.id(&format!("b{i}"))?))?;
        if i + 1 < layers {
            h = h.swish();
        }
    }
    Ok(h.square()?.mean())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn three_layer_mlp_matches_central_differences(seed in 0u64..10_000, rows in 1usize..4) {
        let dims = [3, 5, 4, 2];
        let store = mlp_store(seed, &dims);
        let x = random_tensor(rows, 3, seed ^ 0xabc);
        let r = grad_check(|b| mlp(b, &x, 3), &store, FD_STEP).unwrap();
        prop_assert!(r.max_relative_error < 1e-6, "{:?}", r);
    }

    #[test]
    fn gradients_have_parameter_shapes(seed in 0u64..10_000) {
        let store = mlp_store(seed, &[2, 3, 2]);
        let x = random_tensor(2, 2, seed);
        let g = Graph::<f64>::new();
        let b = Binder::new(&g, &store);
        let loss = mlp(&b, &x, 2).unwrap();
        let grads = b.grads(&g.backward(loss).unwrap());
        for id in store.ids() {
            prop_assert_eq!(grads.get(id).map(|v| v.len()), Some(store.get(id).numel()));
        }
    }

    #[test]
    fn backward_is_repeatable(seed in 0u64..10_000) {
        let store = mlp_store(seed, &[2, 4, 1]);
        let x = random_tensor(3, 2, seed + 1);
        let run = || {
            let g = Graph::<f64>::new();
            let b = Binder::new(&g, &store);
            let loss = mlp(&b, &x, 2).unwrap();
            let grads = b.grads(&g.backward(loss).unwrap());
            store.ids().map(|id| grads.get(id).unwrap().to_vec()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn frozen_binder_gives_no_gradients(seed in 0u64..10_000) {
        let store = mlp_store(seed, &[2, 2, 1]);
        let x = random_tensor(2, 2, seed);
        let g = Graph::<f64>::new();
        let b = Binder::frozen(&g, &store);
        let loss = mlp(&b, &x, 2).unwrap();
        let grads = b.grads(&g.backward(loss).unwrap());
        for id in store.ids() {
            prop_assert!(grads.is_zero(id));
        }
    }

    #[test]
    fn f32_and_f64_paths_agree(seed in 0u64..10_000) {
        let store = mlp_store(seed, &[3, 4, 2]);
        let x = random_tensor(2, 3, seed);
        let g64 = Graph::<f64>::new();
        let v64 = {
            let b = Binder::frozen(&g64, &store);
            let s = b.store();
            b.constant(x.clone()).matmul(b.get(s.id("w0").unwrap())).unwrap().swish().sum().item()
        };
        let g32 = Graph::<f32>::new();
        let v32 = {
            let b = Binder::frozen(&g32, &store);
            let s = b.store();
            b.constant(x.cast()).matmul(b.get(s.id("w0").unwrap())).unwrap().swish().sum().item()
        };
        prop_assert!((v64 - v32 as f64).abs() < 1e-4 * (1.0 + v64.abs()));
    }
}

#[test]
fn random_tensors_are_seeded() {
    let a = random_tensor(2, 2, 5);
    let b = random_tensor(2, 2, 5);
    assert_eq!(a, b);
    let _ = rng(0).gen::<u8>();
}

