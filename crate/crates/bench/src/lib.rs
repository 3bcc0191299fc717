//! Fixtures shared by the benchmarks.

use molgap::check::perturb;
use molgap::profile::{model_config, Profile};
use molgap::synth::{synthetic_molecules, SynthConfig};
use molgap::{featurize_all, FeaturizedGraph, Model, ModelConfig, ModelKind, MolecularGraph, ParameterStore, RbfConfig, Regressor, Schema, SpatialMode};

pub fn molecules(count: usize, max_atoms: usize) -> (Schema, Vec<MolecularGraph>) {
    synthetic_molecules(&SynthConfig {
        count,
        min_atoms: max_atoms / 2,
        max_atoms,
        ..Default::default()
    })
}

/// Mini-profile model with perturbed parameters and `count` molecules
/// featurized for it.
pub fn mini_fixture(kind: ModelKind, count: usize) -> (Model, ParameterStore, Vec<FeaturizedGraph>) {
    let (schema, graphs) = molecules(count, 20);
    let cfg = model_config(kind, Profile::Mini, schema.clone());
    let (rbf, mode) = match &cfg {
        ModelConfig::Graphormer(c) => (c.rbf, c.spatial_mode),
        ModelConfig::Expc(_) => (RbfConfig::with_kernels(1), SpatialMode::Hop),
    };
    let model = Model::from_config(&cfg).expect("mini config is valid");
    let mut params = model.init_params(0);
    perturb(&mut params, 0.1, 1);
    let data = featurize_all(&graphs, &schema, &rbf, mode, 1).expect("synthetic molecules are valid");
    (model, params, data)
}
