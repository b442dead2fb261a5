use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

use super::gradcheck::{rand_tensor, rel_err, EPS};

#[test]
fn every_primitive_matches_finite_differences() {
    let checks = primitive_gradcheck(7, 5);
    for c in &checks {
        assert!(c.max_rel_err < 1e-6, "{}: relative error {:e}", c.name, c.max_rel_err);
    }
    assert!(checks.iter().map(|c| c.trials).sum::<usize>() >= 100);
}

#[test]
fn three_layer_perceptron_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let dims = [5, 8, 6, 2];
    let mut layers = Vec::new();
    for l in 0..3 {
        let w = store.normal(&mut rng, "mlp", &format!("w{l}"), vec![dims[l], dims[l + 1]], 0.5);
        let b = store.normal(&mut rng, "mlp", &format!("b{l}"), vec![dims[l + 1]], 0.1);
        layers.push((w, b));
    }
    let x = rand_tensor(&mut rng, vec![4, 5], -1.0, 1.0);
    let target = rand_tensor(&mut rng, vec![4, 2], -1.0, 1.0);
    let forward = |store: &ParamStore<f64>| -> (f64, Grads<f64>) {
        let mut g = Graph::new(store);
        let mut h = g.input(x.clone());
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = g.linear(h, w, b).unwrap();
            if i < 2 {
                h = g.tanh(h).unwrap();
            }
        }
        let t = g.input(target.clone());
        let loss = g.mse_loss(h, t).unwrap();
        let back = g.backward(loss).unwrap();
        (g.scalar(loss), back.params)
    };
    let (_, grads) = forward(&store);
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        for i in 0..store.get(id).len() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += EPS;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= EPS;
            let numeric = (forward(&plus).0 - forward(&minus).0) / (2.0 * EPS);
            worst = worst.max(rel_err(grads.get(id).unwrap()[i], numeric));
        }
    }
    assert!(worst < 1e-6, "perceptron relative error {worst:e}");
}

#[test]
fn square_and_identity_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let back = g.backward(y).unwrap();
    assert_eq!(g.scalar(y), 9.0);
    assert_eq!(back.wrt(x).unwrap(), &[6.0]);

    let mut g = Graph::new(&store);
    let x = g.variable(Tensor::scalar(-1.25));
    let back = g.backward_with(x, vec![1.0]).unwrap();
    assert_eq!(back.wrt(x).unwrap(), &[1.0]);
}

#[test]
fn shape_mismatch_names_node() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let a = g.input(Tensor::zeros(vec![2, 3]));
    let b = g.input(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, NnError::Shape { node: Some(2), op: "matmul", .. }), "{err}");
    let c = g.input(Tensor::zeros(vec![3]));
    assert!(matches!(g.add(a, c), Err(NnError::Shape { op: "add", .. })));
}

#[test]
fn forward_reference_is_a_cycle() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let a = g.input(Tensor::zeros(vec![2]));
    // node 1 would consume itself
    let err = g.add(a, NodeId(1)).unwrap_err();
    assert!(matches!(err, NnError::Cycle { node: 1, input: 1 }));
}

#[test]
fn mse_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let t = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
    let p = g.input(t(&[0.3, 0.7]));
    let l = g.mse_loss(p, p).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let ones = g.input(t(&[1.0; 4]));
    let zeros = g.input(t(&[0.0; 4]));
    let l = g.mse_loss(ones, zeros).unwrap();
    assert_eq!(g.scalar(l), 1.0);
    let a = g.input(t(&[1.0, 0.5, 0.0, 0.0]));
    let b = g.input(t(&[0.5, 0.5, 0.0, 0.0]));
    let l = g.mse_loss(a, b).unwrap();
    assert!((g.scalar(l) - 0.0625).abs() < 1e-15);
}

#[test]
fn masked_mse_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let t = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
    let target = g.input(t(&[1.0, 0.5, 0.0, 0.0]));
    let pred = g.input(t(&[0.5, 0.5, 0.7, 0.1]));
    let l = g.masked_mse_loss(pred, target, &[1.0, 1.0, 0.0, 0.0], 4, 2).unwrap();
    assert!((g.scalar(l) - 0.125).abs() < 1e-15);
    assert!(matches!(g.masked_mse_loss(pred, target, &[0.0; 4], 4, 0), Err(NnError::Invalid(_))));
}

#[test]
fn masked_mse_all_ones_is_bitwise_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store = ParamStore::<f64>::new();
    for _ in 0..50 {
        let n = rng.random_range(1..200);
        let mut g = Graph::new(&store);
        let p = g.input(rand_tensor(&mut rng, vec![n], 0.0, 1.0));
        let t = g.input(rand_tensor(&mut rng, vec![n], 0.0, 1.0));
        let a = g.mse_loss(p, t).unwrap();
        let b = g.masked_mse_loss(p, t, &vec![1.0; n], 16, 16).unwrap();
        assert_eq!(g.scalar(a).to_bits(), g.scalar(b).to_bits());
    }
}

#[test]
fn masked_pixels_contribute_nothing_when_target_premasked() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let store = ParamStore::<f64>::new();
    for _ in 0..20 {
        let mask: Vec<f64> = (0..32).map(|i| if (i / 4) % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let s = rand_tensor(&mut rng, vec![32], 0.0, 1.0);
        let target: Vec<f64> = s.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let mut junk = target.clone();
        for (j, m) in junk.iter_mut().zip(&mask) {
            if *m == 0.0 {
                *j = rng.random_range(-5.0..5.0);
            }
        }
        let mut g = Graph::new(&store);
        let t = g.input(Tensor::new(vec![32], target.clone()).unwrap());
        let p_exact = g.input(Tensor::new(vec![32], target).unwrap());
        let p_junk = g.input(Tensor::new(vec![32], junk).unwrap());
        let a = g.masked_mse_loss(p_exact, t, &mask, 8, 4).unwrap();
        let b = g.masked_mse_loss(p_junk, t, &mask, 8, 4).unwrap();
        assert_eq!(g.scalar(a), 0.0);
        assert_eq!(g.scalar(b), 0.0);
    }
}

#[test]
fn quantizer_examples() {
    for (v, q) in [(0.2, 1.0), (-2.5, -3.0), (3.7, 3.0), (0.0, 1.0), (-2.0, -1.0), (2.0, 3.0)] {
        assert_eq!(quantize_level(v), q, "q({v})");
    }
    for l in LEVELS {
        assert_eq!(quantize_level(l), l);
    }
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.variable(Tensor::new(vec![3], vec![0.5, 4.5, -3.9]).unwrap());
    let q = g.quantize_ste(x, QuantMode::Hard).unwrap();
    assert_eq!(g.value(q), &[1.0, 3.0, -3.0]);
    let back = g.backward_with(q, vec![0.7, 0.7, -2.0]).unwrap();
    assert_eq!(back.wrt(x).unwrap(), &[0.7, 0.0, -2.0]);
}

#[test]
fn frozen_groups_get_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.constant("enc", "a", vec![2], 2.0);
    let b = store.constant("cc", "b", vec![2], 3.0);
    let mut g = Graph::new(&store).with_frozen(&["enc"]);
    let pa = g.param(a);
    let pb = g.param(b);
    let y = g.mul(pa, pb).unwrap();
    let l = g.sum(y).unwrap();
    let back = g.backward(l).unwrap();
    assert!(back.params.get(a).is_none());
    assert_eq!(back.params.get(b).unwrap(), &[2.0, 2.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::<f32>::new();
        let w = store.normal(&mut rng, "g", "w", vec![4, 4], 1.0);
        let b = store.normal(&mut rng, "g", "b", vec![4], 1.0);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full(vec![3, 4], 0.5));
        let y = g.linear(x, w, b).unwrap();
        let y = g.gelu(y).unwrap();
        g.value(y).to_vec()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn quantizer_range_and_idempotence(v in -1e6f64..1e6) {
            let q = quantize_level(v);
            prop_assert!(LEVELS.contains(&q));
            prop_assert_eq!(quantize_level(q), q);
        }

        #[test]
        fn quantizer_picks_nearest_level(v in -5.0f64..5.0) {
            let q = quantize_level(v);
            let best = LEVELS.iter().map(|l| (l - v).abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(((q - v).abs() - best).abs() < 1e-12);
        }
    }
}
