//! Finite-difference gradient checks of whole models.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckError, GradCheckReport, Tensor};
use crate::featurize::{featurize_molecule, FeaturizedGraph, RbfConfig, SpatialMode};
use crate::model::{GraphInput, Mode, Model, ModelConfig, ModelError, ModelKind, Regressor};
use crate::graph::{MolecularGraph, Schema};
use crate::profile::{model_config, Profile};
use crate::train::mae_loss;

/// Adds `N(0, std²)` noise to every parameter so no gradient is trivially
/// zero (the output head starts at zero).
pub fn perturb(store: &mut crate::params::ParameterStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("valid std");
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += normal.sample(&mut rng));
    }
}

/// Mean absolute error of `model` over `graphs`, eval mode, checked against
/// central differences.
pub fn model_grad_check(
    model: &Model,
    params: &crate::params::ParameterStore,
    graphs: &[FeaturizedGraph],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError> {
    grad_check(
        params,
        |tape, vars| {
            let mut preds = Vec::with_capacity(graphs.len());
            for g in graphs {
                preds.push(model.forward(tape, vars, GraphInput::clean(g), Mode::Eval)?);
            }
            let pred = tape.concat(&preds, 0)?;
            let target: Vec<f64> = graphs.iter().map(|g| g.target.unwrap_or(0.0)).collect();
            let target = Tensor::from_vec(&[graphs.len(), 1], target)?;
            Ok(mae_loss(tape, pred, &target)?)
        },
        cfg,
    )
}

/// Five-atom chain plus one ring bond whose bond lengths are spread over
/// 0.6 to 3.4 Å, so that every kernel of a short-range RBF sees some bond.
pub fn probe_molecule(id: &str, rng: &mut impl Rng) -> MolecularGraph {
    let mut lengths = [0.6, 1.3, 2.0, 2.7];
    lengths.shuffle(rng);
    let mut coords = vec![[0.0f64; 3]];
    for &len in &lengths {
        let prev = *coords.last().expect("non-empty");
        let next = loop {
            let dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 0.2 {
                continue;
            }
            let cand: [f64; 3] = std::array::from_fn(|k| prev[k] + len * dir[k] / norm);
            let clear = coords.iter().all(|c| {
                (0..3).map(|k| (c[k] - cand[k]).powi(2)).sum::<f64>().sqrt() > 0.5
            });
            if clear {
                break cand;
            }
        };
        coords.push(next);
    }
    let bonds = vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)];
    let atom_features = (0..5)
        .map(|_| {
            vec![
                rng.gen_range(5..9),
                0,
                2,
                5,
                rng.gen_range(0..4),
                0,
                rng.gen_range(1..4),
                rng.gen_range(0..2),
                1,
            ]
        })
        .collect();
    let bond_features = (0..5).map(|_| vec![rng.gen_range(0..4), 0, 1]).collect();
    MolecularGraph {
        id: id.to_string(),
        atom_features,
        bonds,
        bond_features,
        coords,
        target: Some(rng.gen_range(-1.0..1.0)),
    }
}

/// Model built from `cfg` with perturbed parameters and `n_graphs` probe
/// molecules featurized to match it.
pub fn probe_setup(
    cfg: &ModelConfig,
    n_graphs: usize,
    seed: u64,
) -> Result<(Model, crate::params::ParameterStore, Vec<FeaturizedGraph>), ModelError> {
    let model = Model::from_config(cfg)?;
    let mut params = model.init_params(seed);
    perturb(&mut params, 0.3, seed ^ 0x9e37);
    let (schema, rbf, mode) = match cfg {
        ModelConfig::Graphormer(c) => (&c.schema, c.rbf, c.spatial_mode),
        ModelConfig::Expc(c) => (&c.schema, RbfConfig::with_kernels(1), SpatialMode::Hop),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = (0..n_graphs)
        .map(|i| {
            let g = probe_molecule(&format!("probe{i}"), &mut rng);
            featurize_molecule(&g, schema, &rbf, mode)
        })
        .collect::<Result<_, _>>()?;
    Ok((model, params, graphs))
}

/// [`probe_setup`] for the mini profile on the OGB schema.
pub fn mini_setup(
    kind: ModelKind,
    n_graphs: usize,
    seed: u64,
) -> (Model, crate::params::ParameterStore, Vec<FeaturizedGraph>) {
    let cfg = model_config(kind, Profile::Mini, Schema::ogb());
    probe_setup(&cfg, n_graphs, seed).expect("mini config and probe molecules are valid")
}
