mod common;

use common::*;
use molgap::train::{evaluate_mae, Split};
use molgap::{ModelKind, Regressor, TrainConfig};

#[test]
fn graphormer_fit_is_bit_identical() {
    check_fit_determinism(ModelKind::Graphormer, 3).unwrap();
}

#[test]
fn expc_fit_is_bit_identical() {
    check_fit_determinism(ModelKind::Expc, 4).unwrap();
}

#[test]
fn parallel_featurization_writes_identical_caches() {
    check_cache_determinism(40, 5).unwrap();
}

#[test]
fn zero_budget_returns_the_initialization() {
    for kind in [ModelKind::Graphormer, ModelKind::Expc] {
        let (model, data) = mini_problem(kind, 8, 6);
        let cfg = match short_schedule(kind) {
            TrainConfig::Graphormer(mut c) => {
                c.max_steps = 0;
                TrainConfig::Graphormer(c)
            }
            TrainConfig::Expc(mut c) => {
                c.max_epochs = 0;
                TrainConfig::Expc(c)
            }
        };
        let out = fit_quiet(&model, &data, &Split::all(data.len()), &cfg, 9, 1);
        assert_eq!(out.steps, 0);
        assert_eq!(out.checkpoint.params, model.init_params(9));
    }
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let (model, data) = mini_problem(ModelKind::Graphormer, 12, 7);
    let out = fit_quiet(&model, &data, &Split::all(data.len()), &short_schedule(ModelKind::Graphormer), 1, 1);
    let a = evaluate_mae(&out.checkpoint, &data, 1).unwrap();
    let b = evaluate_mae(&out.checkpoint, &data, 3).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
