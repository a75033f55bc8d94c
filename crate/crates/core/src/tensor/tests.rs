use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random linear functional so every output element gets an O(1) gradient.
fn project(g: &mut Graph, x: Var, rng: &mut ChaCha8Rng) -> Result<Var, Error> {
    let w = rand_tensor(rng, g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

#[test]
fn identity_kernel_conv_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 3, 11]);
    let mut w = Tensor::zeros(&[3, 3, 3]);
    for c in 0..3 {
        w.data_mut()[(c * 3 + c) * 3 + 1] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w);
    let y = g.conv1d(xv, wv, 1, (1, 1)).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 5], 0.3));
    let y = g.softmax(x, 1).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn square_and_product_gradients() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = g.param(Tensor::scalar(5.0));
    let z = g.mul(x, y).unwrap();
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    assert_eq!(grads.get(y).unwrap().data(), &[2.0]);
}

#[test]
fn backward_clears_tape_and_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[3]));
    assert!(matches!(g.backward(x), Err(Error::Shape { op: "backward", .. })));
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert!(g.is_empty());
}

#[test]
fn shape_mismatch_names_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    match g.add(a, b) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "add");
            assert!(detail.contains("[2, 3]"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(g.matmul(a, a), Err(Error::Shape { op: "matmul", .. })));
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        rand_tensor(&mut rng, &[4, 5]),
        rand_tensor(&mut rng, &[5, 6]),
        rand_tensor(&mut rng, &[6]),
        rand_tensor(&mut rng, &[6, 2]),
    ];
    let err = gradient_check(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.bias_add(h, v[2])?;
            let h = g.tanh(h);
            let o = g.matmul(h, v[3])?;
            let o = g.mul(o, o)?;
            Ok(g.mean_all(o))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])];
    let w = rand_tensor(&mut rng, &[3, 4]);
    let err = gradient_check(
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let wv = g.constant(w.clone());
            let p = g.mul(s, wv)?;
            let p = g.scale(p, 3.0);
            Ok(g.sum_all(p))
        },
        &inputs,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-10, "relative error {err}");
}

#[test]
fn conv_tanh_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![rand_tensor(&mut rng, &[2, 3, 12]), rand_tensor(&mut rng, &[4, 3, 3])];
    let prng = ChaCha8Rng::seed_from_u64(10);
    let err = gradient_check(
        |g, v| {
            let y = g.conv1d(v[0], v[1], 2, (2, 0))?;
            let y = g.tanh(y);
            project(g, y, &mut prng.clone())
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn matmul_is_associative() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b, c) = (
        rand_tensor(&mut rng, &[8, 8]),
        rand_tensor(&mut rng, &[8, 8]),
        rand_tensor(&mut rng, &[8, 8]),
    );
    let mut g = Graph::new();
    let (a, b, c) = (g.constant(a), g.constant(b), g.constant(c));
    let ab = g.matmul(a, b).unwrap();
    let left = g.matmul(ab, c).unwrap();
    let bc = g.matmul(b, c).unwrap();
    let right = g.matmul(a, bc).unwrap();
    assert!(g.value(left).max_abs_diff(g.value(right)) < 1e-10);
}

#[test]
fn frozen_batchnorm_ignores_batch_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let single = rand_tensor(&mut rng, &[1, 3, 7]);
    let other = rand_tensor(&mut rng, &[1, 3, 7]);
    let mut both = single.data().to_vec();
    both.extend_from_slice(&other.data().iter().map(|v| v * 50.0).collect::<Vec<_>>());
    let both = Tensor::new(&[2, 3, 7], both).unwrap();
    let mean = [0.1, -0.2, 0.3];
    let var = [1.5, 0.5, 2.0];
    let run = |x: Tensor| {
        let mut g = Graph::new();
        let x = g.constant(x);
        let gamma = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 0.5]).unwrap());
        let beta = g.constant(Tensor::new(&[3], vec![0.0, 0.1, -0.1]).unwrap());
        let (y, stats) = g
            .batchnorm1d(x, gamma, beta, BatchNormMode::Frozen { mean: &mean, var: &var })
            .unwrap();
        assert!(stats.is_none());
        g.value(y).data().to_vec()
    };
    let a = run(single);
    let b = run(both);
    assert_eq!(&a[..], &b[..21]);
}

#[test]
fn train_batchnorm_normalizes_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(&[4, 2, 9], |i| rng.random_range(-3.0..3.0) + i as f64 * 0.1);
    let mut g = Graph::new();
    let x = g.constant(x);
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g.batchnorm1d(x, gamma, beta, BatchNormMode::Train).unwrap();
    assert!(stats.is_some());
    let y = g.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|b| y[(b * 2 + c) * 9..][..9].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-6);
        // eps in the denominator pulls the variance slightly under 1
        assert!((v - 1.0).abs() < 1e-4, "var {v}");
    }
}

#[test]
fn fft_ops_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::from_fn(&[1, 2, 256], |i| if i < 256 { rng.random_range(-1.0..1.0) } else { 0.0 });
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let f = g.fft(xv, 256).unwrap();
    let back = g.ifft(f, 256).unwrap();
    assert!(g.value(back).max_abs_diff(&x) < 1e-9);
}

#[test]
fn non_power_of_two_fft_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 5]));
    assert!(g.fft(x, 6).is_err());
    assert!(g.fft(x, 4).is_err());
}
