mod common;

use std::collections::BTreeSet;

use axis_core::linalg::{svd, Matrix};
use axis_core::merge::{
    decompose_sources, merge_pipeline, select, synthesize, KBudget, MergeConfig, SelectionStrategy,
};
use axis_core::params::TaskVector;
use common::{diagonal_task_vector, random_task_vector, relative_frobenius, scan_select};
use proptest::prelude::*;

fn selected(basis: &axis_core::merge::TransferBasis, layer: &str) -> Vec<(usize, usize)> {
    basis.layers[layer]
        .components
        .iter()
        .map(|c| (c.source_index, c.comp_index))
        .collect()
}

#[test]
fn top_and_bottom_match_scan_oracle_with_ties() {
    let sources = vec![
        diagonal_task_vector("a", 6, 6, &[5.0, 3.0, 3.0, 1.0]),
        diagonal_task_vector("b", 6, 6, &[5.0, 3.0, 2.0]),
        diagonal_task_vector("c", 6, 6, &[4.0, 3.0, 1.0, 1.0]),
    ];
    let pool = decompose_sources(&sources, 1e-12).unwrap();
    for k in 1..=11 {
        for (strategy, largest) in [(SelectionStrategy::Top, true), (SelectionStrategy::Bottom, false)] {
            let basis = select(&pool, strategy, KBudget::Count(k), 0).unwrap();
            assert_eq!(selected(&basis, "w").len(), k);
            let got: BTreeSet<_> = selected(&basis, "w").into_iter().collect();
            let want: BTreeSet<_> = scan_select(&pool, "w", k, largest).into_iter().collect();
            assert_eq!(got, want, "{strategy} k={k}");
        }
    }
}

#[test]
fn single_source_full_rank_round_trip() {
    let mut rng = common::rng(3);
    let tv = random_task_vector(&mut rng, "only", &[(9, 7), (4, 9)]);
    let merged = merge_pipeline(&[tv.clone()], &MergeConfig { k: KBudget::Fraction(1.0), ..MergeConfig::default() }).unwrap();
    for (name, m) in tv.matrix_layers() {
        assert!(relative_frobenius(&merged.layers[name].delta(), m) < 1e-8, "{name}");
    }
    for (name, v) in tv.deltas.vector_layers() {
        assert_eq!(merged.vector_deltas[name], v);
    }
}

#[test]
fn top_delta_matches_brute_force_pipeline() {
    // Brute force: SVD each source, gather every triplet, fully sort, sum
    // the first K rank-one terms, SVD the sum.
    let mut rng = common::rng(4);
    let sources: Vec<TaskVector> = (0..3)
        .map(|i| random_task_vector(&mut rng, &format!("s{i}"), &[(8, 6)]))
        .collect();
    let k = 5;
    let mut triplets: Vec<(f64, usize, usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for (si, tv) in sources.iter().enumerate() {
        let f = svd(tv.deltas.matrix("l0.weight").unwrap(), 1e-12).unwrap();
        for j in 0..f.rank() {
            triplets.push((f.s[j], si, j, f.u.col(j), f.v.col(j)));
        }
    }
    triplets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut sum = Matrix::zeros(8, 6);
    for (s, _, _, u, v) in &triplets[..k] {
        for r in 0..8 {
            for c in 0..6 {
                sum.as_mut_slice()[r * 6 + c] += s * u[r] * v[c];
            }
        }
    }
    let merged = merge_pipeline(&sources, &MergeConfig { k: KBudget::Count(k), ..MergeConfig::default() }).unwrap();
    let layer = &merged.layers["l0.weight"];
    assert!(relative_frobenius(&layer.delta(), &sum) < 1e-10);
    let oracle = common::oracle_singular_values(&sum);
    for (got, want) in layer.s.iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-8 * oracle[0]);
    }
}

#[test]
fn equal_top_contribution_quota() {
    let sources = vec![
        diagonal_task_vector("a", 5, 5, &[1.0, 0.9, 0.8]),
        diagonal_task_vector("b", 5, 5, &[9.0, 8.0, 7.0]),
        diagonal_task_vector("c", 5, 5, &[4.0, 3.0, 2.0]),
    ];
    let pool = decompose_sources(&sources, 1e-12).unwrap();
    let basis = select(&pool, SelectionStrategy::EqualTopContribution, KBudget::Count(5), 0).unwrap();
    let mut per_source = [0usize; 3];
    for (src, comp) in selected(&basis, "w") {
        per_source[src] += 1;
        assert!(comp < 2, "each source contributes its own leading components");
    }
    assert_eq!(per_source, [2, 2, 1]);
}

#[test]
fn average_strategies_on_identical_sources() {
    let a = diagonal_task_vector("a", 4, 4, &[3.0, 2.0, 1.0]);
    let sources = vec![a.clone(), TaskVector { source_id: "b".into(), ..a.clone() }];
    let pool = decompose_sources(&sources, 1e-12).unwrap();
    let top = select(&pool, SelectionStrategy::AverageTop, KBudget::Count(2), 0).unwrap();
    let sig: Vec<f64> = top.layers["w"].components.iter().map(|c| c.sigma).collect();
    assert!((sig[0] - 3.0).abs() < 1e-12 && (sig[1] - 2.0).abs() < 1e-12);
    let bottom = select(&pool, SelectionStrategy::AverageBottom, KBudget::Count(2), 0).unwrap();
    let sig: Vec<f64> = bottom.layers["w"].components.iter().map(|c| c.sigma).collect();
    assert!((sig[0] - 2.0).abs() < 1e-12 && (sig[1] - 1.0).abs() < 1e-12);
}

#[test]
fn rank_bound_across_k_sweep() {
    let mut rng = common::rng(5);
    let sources: Vec<TaskVector> = (0..4)
        .map(|i| random_task_vector(&mut rng, &format!("s{i}"), &[(64, 48), (20, 64)]))
        .collect();
    for k in [1usize, 4, 16, 64] {
        let merged = merge_pipeline(&sources, &MergeConfig { k: KBudget::Count(k), ..MergeConfig::default() }).unwrap();
        for (name, layer) in &merged.layers {
            let s = svd(&layer.delta(), 0.0).unwrap().s;
            let significant = s.iter().filter(|&&x| x > 1e-10 * s[0]).count();
            assert!(significant <= k, "{name}: rank {significant} > K {k}");
        }
    }
}

#[test]
fn arbitrary_depends_only_on_seed() {
    let mut rng = common::rng(6);
    let sources: Vec<TaskVector> = (0..3)
        .map(|i| random_task_vector(&mut rng, &format!("s{i}"), &[(10, 10)]))
        .collect();
    let pool = decompose_sources(&sources, 1e-12).unwrap();
    let a = select(&pool, SelectionStrategy::Arbitrary, KBudget::Count(7), 42).unwrap();
    let b = select(&pool, SelectionStrategy::Arbitrary, KBudget::Count(7), 42).unwrap();
    let c = select(&pool, SelectionStrategy::Arbitrary, KBudget::Count(7), 43).unwrap();
    assert_eq!(selected(&a, "l0.weight"), selected(&b, "l0.weight"));
    assert_ne!(selected(&a, "l0.weight"), selected(&c, "l0.weight"));
}

#[test]
fn skip_final_svd_delta_equals_synthesized_sum() {
    let mut rng = common::rng(7);
    let sources: Vec<TaskVector> = (0..3)
        .map(|i| random_task_vector(&mut rng, &format!("s{i}"), &[(6, 5)]))
        .collect();
    let cfg = MergeConfig { k: KBudget::Count(4), skip_final_svd: true, ..MergeConfig::default() };
    let merged = merge_pipeline(&sources, &cfg).unwrap();
    let pool = decompose_sources(&sources, cfg.rank_tol).unwrap();
    let dense = synthesize(&select(&pool, cfg.strategy, cfg.k, 0).unwrap());
    let layer = &merged.layers["l0.weight"];
    assert!(!layer.orthogonal);
    assert!(relative_frobenius(&layer.delta(), &dense["l0.weight"]) < 1e-12);
}

fn energy(s: &[f64]) -> f64 {
    s.iter().map(|x| x * x).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn top_set_equals_oracle(seed in any::<u64>(), sources in 1usize..5, k in 1usize..20) {
        let mut rng = common::rng(seed);
        // Quantized singular values make ties frequent.
        let tvs: Vec<TaskVector> = (0..sources)
            .map(|i| {
                let sig: Vec<f64> = (0..4).map(|_| (rand::Rng::random_range(&mut rng, 1..5)) as f64).collect();
                diagonal_task_vector(&format!("s{i}"), 4, 4, &sig)
            })
            .collect();
        let pool = decompose_sources(&tvs, 1e-12).unwrap();
        let basis = select(&pool, SelectionStrategy::Top, KBudget::Count(k), 0).unwrap();
        let got: BTreeSet<_> = selected(&basis, "w").into_iter().collect();
        let want: BTreeSet<_> = scan_select(&pool, "w", k, true).into_iter().collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn top_energy_dominates_bottom(seed in any::<u64>(), k in 1usize..12) {
        let mut rng = common::rng(seed);
        let tvs: Vec<TaskVector> = (0..3)
            .map(|i| random_task_vector(&mut rng, &format!("s{i}"), &[(7, 5)]))
            .collect();
        let pool = decompose_sources(&tvs, 1e-12).unwrap();
        let sig = |s| -> Vec<f64> {
            select(&pool, s, KBudget::Count(k), 0).unwrap().layers["l0.weight"].components.iter().map(|c| c.sigma).collect()
        };
        prop_assert!(energy(&sig(SelectionStrategy::Top)) >= energy(&sig(SelectionStrategy::Bottom)));
    }

    #[test]
    fn merged_factors_are_orthonormal(seed in any::<u64>(), k in 1usize..10) {
        let mut rng = common::rng(seed);
        let tvs: Vec<TaskVector> = (0..3)
            .map(|i| random_task_vector(&mut rng, &format!("s{i}"), &[(9, 6)]))
            .collect();
        let merged = merge_pipeline(&tvs, &MergeConfig { k: KBudget::Count(k), ..MergeConfig::default() }).unwrap();
        let l = &merged.layers["l0.weight"];
        prop_assert!(l.width() <= k);
        prop_assert!(l.u.transpose().matmul(&l.u).unwrap().max_abs_diff(&Matrix::identity(l.width())) < 1e-10);
        prop_assert!(l.v.transpose().matmul(&l.v).unwrap().max_abs_diff(&Matrix::identity(l.width())) < 1e-10);
        prop_assert!(l.s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn source_order_is_irrelevant_for_top_without_ties(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let tvs: Vec<TaskVector> = (0..3)
            .map(|i| random_task_vector(&mut rng, &format!("s{i}"), &[(6, 6)]))
            .collect();
        let rev: Vec<TaskVector> = tvs.iter().rev().cloned().collect();
        let cfg = MergeConfig { k: KBudget::Count(5), ..MergeConfig::default() };
        let a = merge_pipeline(&tvs, &cfg).unwrap();
        let b = merge_pipeline(&rev, &cfg).unwrap();
        prop_assert!(relative_frobenius(&a.layers["l0.weight"].delta(), &b.layers["l0.weight"].delta()) < 1e-10);
    }
}
