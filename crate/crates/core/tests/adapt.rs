mod common;

use axis_core::adapt::{assemble_weights, learnable_width, split_learnable, train, TrainConfig};
use axis_core::io::container::encode;
use axis_core::io::ContainerObject;
use axis_core::merge::{merge_pipeline, KBudget, MergeConfig};
use axis_core::net::{loss, Batch};
use axis_core::params::TaskVector;
use common::{adapt_fixture, random_matrix, random_task_vector, tensor_bytes};

fn labelled(seed: u64, n: usize, d: usize, classes: usize) -> Batch {
    let mut rng = common::rng(seed);
    let x = random_matrix(&mut rng, n, d);
    let labels = (0..n).map(|i| (x.row(i)[0] > 0.0) as usize % classes).collect();
    Batch::new(x, labels).unwrap()
}

#[test]
fn only_lambda_changes_on_disk() {
    let mut fx = adapt_fixture(21, &[8, 6, 3], 4);
    let merged = {
        let mut rng = common::rng(22);
        let tvs: Vec<TaskVector> = (0..3)
            .map(|i| {
                let mut tv = random_task_vector(&mut rng, &format!("s{i}"), &[]);
                for (name, t) in fx.theta_pre.iter() {
                    tv.deltas.insert(name, t.map(|x| 0.3 * x.sin())).unwrap();
                }
                tv
            })
            .collect();
        merge_pipeline(&tvs, &MergeConfig::default()).unwrap()
    };
    fx.state = split_learnable(&merged, 0.5).unwrap().0;
    let data = labelled(23, 64, 8, 3);
    let before = encode(&ContainerObject::AdaptState(fx.state.clone()));
    let cfg = TrainConfig { epochs: 3, learning_rate: 0.5, batch_size: 16, seed: 1 };
    let (trained, history) = train(&fx.state, &fx.theta_pre, &fx.spec, &data, None, &cfg).unwrap();
    let after = encode(&ContainerObject::AdaptState(trained.clone()));
    assert_eq!(history.len(), 3);
    assert_eq!(before.len(), after.len());
    let mut lambda_changed = false;
    for (name, layer) in &fx.state.layers {
        for role in ["U", "V", "s_frozen"] {
            let key = format!("{name}::{role}");
            assert_eq!(tensor_bytes(&before, &key), tensor_bytes(&after, &key), "{key}");
        }
        let key = format!("{name}::lambda");
        lambda_changed |= tensor_bytes(&before, &key) != tensor_bytes(&after, &key);
        assert_eq!(layer.lambda.len(), trained.layers[name].lambda.len());
    }
    for name in fx.state.vector_deltas.keys() {
        assert_eq!(tensor_bytes(&before, name), tensor_bytes(&after, name));
    }
    assert!(lambda_changed);
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let fx = adapt_fixture(31, &[8, 6, 3], 4);
    let data = labelled(32, 128, 8, 3);
    let cfg = TrainConfig { epochs: 5, learning_rate: 0.05, batch_size: 16, seed: 9 };
    let l0 = loss(&fx.spec, &assemble_weights(&fx.state, &fx.theta_pre).unwrap(), &data).unwrap();
    let (a, _) = train(&fx.state, &fx.theta_pre, &fx.spec, &data, None, &cfg).unwrap();
    let (b, _) = train(&fx.state, &fx.theta_pre, &fx.spec, &data, None, &cfg).unwrap();
    assert_eq!(a, b);
    let l1 = loss(&fx.spec, &assemble_weights(&a, &fx.theta_pre).unwrap(), &data).unwrap();
    assert!(l1 < l0, "{l1} >= {l0}");
}

#[test]
fn negligible_learning_rate_keeps_state() {
    let fx = adapt_fixture(41, &[5, 4, 2], 4);
    let data = labelled(42, 32, 5, 2);
    let cfg = TrainConfig { epochs: 2, learning_rate: 1e-30, batch_size: 8, seed: 0 };
    let (out, _) = train(&fx.state, &fx.theta_pre, &fx.spec, &data, None, &cfg).unwrap();
    assert_eq!(
        encode(&ContainerObject::AdaptState(out)),
        encode(&ContainerObject::AdaptState(fx.state))
    );
}

#[test]
fn divergence_is_reported() {
    let fx = adapt_fixture(51, &[5, 4, 2], 4);
    let data = labelled(52, 32, 5, 2);
    let cfg = TrainConfig { epochs: 3, learning_rate: 1e300, batch_size: 8, seed: 0 };
    let err = train(&fx.state, &fx.theta_pre, &fx.spec, &data, None, &cfg).unwrap_err();
    assert_eq!(err.kind(), "DivergenceDetected");
}

#[test]
fn learnable_count_independent_of_source_count() {
    let mut rng = common::rng(61);
    let all: Vec<TaskVector> = (0..5)
        .map(|i| random_task_vector(&mut rng, &format!("s{i}"), &[(16, 12), (4, 16)]))
        .collect();
    let cfg = MergeConfig { k: KBudget::Fraction(0.25), ..MergeConfig::default() };
    let count = |n: usize| {
        let merged = merge_pipeline(&all[..n], &cfg).unwrap();
        let (state, _) = split_learnable(&merged, 0.5).unwrap();
        (state.learnable_count(), encode(&ContainerObject::AdaptState(state)).len())
    };
    assert_eq!(count(3), count(5));
    assert_eq!(learnable_width(3, 0.5), 2);
}
