mod common;

use axis_core::adapt::{assemble_weights, sigma_gradient};
use axis_core::net::{forward, loss, loss_and_grads, Batch, MlpSpec};
use axis_core::params::Tensor;
use common::{adapt_fixture, central_difference, naive_logits, naive_loss, random_matrix, rel_err};

const H: f64 = 1e-5;

#[test]
fn forward_matches_naive_loops() {
    let spec = MlpSpec::new(vec![7, 5, 4, 3]).unwrap();
    let params = spec.init(1);
    let mut rng = common::rng(2);
    let batch = Batch::new(random_matrix(&mut rng, 6, 7), vec![0, 1, 2, 0, 1, 2]).unwrap();
    let (logits, _) = forward(&spec, &params, &batch).unwrap();
    for i in 0..6 {
        let want = naive_logits(&spec, &params, batch.inputs.row(i));
        for (a, b) in logits.row(i).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let l = loss(&spec, &params, &batch).unwrap();
    assert!((l - naive_loss(&spec, &params, &batch.inputs, &batch.labels)).abs() < 1e-12);
}

#[test]
fn weight_and_bias_gradients_match_finite_differences() {
    let spec = MlpSpec::new(vec![6, 5, 3]).unwrap();
    let params = spec.init(9);
    let mut rng = common::rng(10);
    let batch = Batch::new(random_matrix(&mut rng, 8, 6), vec![0, 1, 2, 1, 0, 2, 2, 1]).unwrap();
    let (_, grads) = loss_and_grads(&spec, &params, &batch).unwrap();
    for (name, tensor) in params.iter() {
        let analytic = grads[name].values();
        let x0 = tensor.values().to_vec();
        let f = |x: &[f64]| {
            let mut p = params.clone();
            let mut t = tensor.clone();
            t.values_mut().copy_from_slice(x);
            p.insert(name, t).unwrap();
            naive_loss(&spec, &p, &batch.inputs, &batch.labels)
        };
        for i in 0..x0.len() {
            let fd = central_difference(f, &x0, i, H);
            assert!(rel_err(analytic[i], fd, 1e-6) < 1e-4, "{name}[{i}]: {} vs {fd}", analytic[i]);
        }
    }
}

#[test]
fn sigma_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let fx = adapt_fixture(seed, &[8, 6, 4], 12);
        let params = assemble_weights(&fx.state, &fx.theta_pre).unwrap();
        let (_, grads) = loss_and_grads(&fx.spec, &params, &fx.batch).unwrap();
        for (name, layer) in &fx.state.layers {
            let g_w = grads[name.as_str()].as_matrix().unwrap();
            let analytic = sigma_gradient(&layer.u, &layer.v, g_w, layer.lambda.len()).unwrap();
            let f = |lam: &[f64]| {
                let mut st = fx.state.clone();
                st.layers.get_mut(name).unwrap().lambda = lam.to_vec();
                loss(&fx.spec, &assemble_weights(&st, &fx.theta_pre).unwrap(), &fx.batch).unwrap()
            };
            for j in 0..layer.lambda.len() {
                let fd = central_difference(f, &layer.lambda, j, H);
                assert!(rel_err(analytic[j], fd, 1e-6) < 1e-4, "seed {seed} {name} sigma {j}: {} vs {fd}", analytic[j]);
            }
        }
    }
}

#[test]
fn vector_grads_are_vectors() {
    let spec = MlpSpec::new(vec![3, 2]).unwrap();
    let params = spec.init(0);
    let batch = Batch::new(random_matrix(&mut common::rng(1), 2, 3), vec![0, 1]).unwrap();
    let (_, grads) = loss_and_grads(&spec, &params, &batch).unwrap();
    assert!(matches!(grads["fc0.bias"], Tensor::Vector(_)));
    assert!(matches!(grads["fc0.weight"], Tensor::Matrix(_)));
}
