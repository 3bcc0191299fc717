#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use molgap::autodiff::Tensor;
use molgap::graph::{pairwise_euclidean, shortest_path_lengths, HopMatrix};
use molgap::params::ParameterStore;
use molgap::train::{clip_grad_norm, global_norm, mae, Adam, AdamConfig};
use molgap::{ensemble_predict, EnsembleSpec, MolecularGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pairwise_euclidean_matches_double_loop() {
    check_pairwise_euclidean(100, 11).unwrap();
}

#[test]
fn six_atoms_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coords: Vec<[f64; 3]> = (0..6).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let d = pairwise_euclidean(&coords).unwrap();
    let o = distance_oracle(&coords);
    for i in 0..6 {
        for j in 0..6 {
            assert!((d.get(i, j) - o[i][j]).abs() <= 1e-12);
        }
    }
}

#[test]
fn shortest_paths_match_floyd_warshall_and_bfs() {
    check_shortest_paths(100, 12).unwrap();
}

#[test]
fn eight_nodes_match_floyd_warshall() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let g = random_graph(&mut rng, 8, 0.3);
        assert!(hops_match_floyd_warshall(&g, &shortest_path_lengths(&g)));
    }
}

#[test]
fn disconnected_pair_is_unreachable() {
    let g = MolecularGraph {
        id: "pair".into(),
        atom_features: vec![vec![0], vec![0]],
        bonds: vec![],
        bond_features: vec![],
        coords: vec![[0.0; 3], [1.0, 0.0, 0.0]],
        target: None,
    };
    let h = shortest_path_lengths(&g);
    assert_eq!(h.raw(0, 1), HopMatrix::UNREACHABLE);
    assert_eq!(floyd_warshall(2, &g.bonds)[0][1], u64::MAX);
}

#[test]
fn expc_layer_matches_per_node_loop() {
    check_expc_layer(100, 13).unwrap();
}

#[test]
fn spatial_bias_matches_double_loop() {
    check_spatial_bias(100, 14).unwrap();
}

#[test]
fn ensemble_predict_matches_weighted_loop() {
    check_ensemble_predict(100, 15).unwrap();
}

#[test]
fn paper_spec_on_random_predictions() {
    let spec = EnsembleSpec::load(&paper_spec_path()).unwrap();
    assert_eq!(spec.entries.len(), 18);
    let weights: Vec<f64> = spec.entries.iter().map(|e| e.weight).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let preds: Vec<Vec<f64>> = (0..18).map(|_| (0..50).map(|_| rng.gen_range(3.0..7.0)).collect()).collect();
    let got = ensemble_predict(&preds, &spec).unwrap();
    let want = ensemble_oracle(&preds, &weights, 0.96);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn two_models_hand_arithmetic() {
    let spec = spec_from_weights(&[1.0, 3.0]);
    assert_eq!(ensemble_predict(&[vec![0.0], vec![4.0]], &spec).unwrap(), vec![3.0]);
}

#[test]
fn mae_matches_loop_on_batch_of_100() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p: Vec<f64> = (0..100).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let t: Vec<f64> = (0..100).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let mut s = 0.0;
    for i in 0..100 {
        s += (p[i] - t[i]).abs();
    }
    assert!((mae(&p, &t).unwrap() - s / 100.0).abs() <= 1e-12);
}

#[test]
fn adam_matches_reference_loop_on_quadratic() {
    // f(x) = 1.5 (x - 0.7)²
    let grad = |x: f64| 3.0 * (x - 0.7);
    for (x0, lr) in [(2.0, 0.1), (-1.0, 0.01), (0.7001, 0.5)] {
        let want = reference_adam(x0, grad, lr, 10);
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::from_vec(&[1], vec![x0]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for w in want {
            let x = store.tensor(0).data()[0];
            let g = Tensor::from_vec(&[1], vec![grad(x)]).unwrap();
            adam.step(&mut store, &[g], lr).unwrap();
            assert!((store.tensor(0).data()[0] - w).abs() <= 1e-12);
        }
    }
}

#[test]
fn clipped_norm_is_min_of_norm_and_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..200 {
        let scale = rng.gen_range(0.01..4.0);
        let mut grads: Vec<Tensor> = (0..rng.gen_range(1..5))
            .map(|_| {
                let len = rng.gen_range(1..20);
                Tensor::from_vec(&[len], (0..len).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
            })
            .collect();
        let pre = clip_grad_norm(&mut grads, 5.0).unwrap();
        let mut sq = 0.0;
        for g in &grads {
            for x in g.data() {
                sq += x * x;
            }
        }
        assert!((sq.sqrt() - pre.min(5.0)).abs() <= 1e-9);
        assert!((global_norm(&grads) - pre.min(5.0)).abs() <= 1e-9);
    }
}
