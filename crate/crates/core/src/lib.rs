//! Molecular HOMO-LUMO gap regression with two graph models: a
//! distance-biased graph transformer and an edge-gated message-passing network
//! with a virtual node, plus the training, cross-validation and ensembling
//! protocol around them.
//!
//! Everything runs on a small reverse-mode autodiff tape over dense `f64`
//! arrays ([`autodiff`]).

pub mod autodiff;
mod binio;
pub mod cache;
pub mod check;
pub mod dataset;
pub mod ensemble;
pub mod expc;
pub mod featurize;
pub mod graph;
pub mod graphormer;
pub mod model;
pub mod params;
pub mod profile;
pub mod seed;
pub mod synth;
pub mod train;

pub use autodiff::{grad_check, GradCheckConfig, GradCheckReport, Tape, Tensor, TensorError, Var};
pub use cache::{read_cache, write_cache, CacheError, CacheHeader};
pub use dataset::{load_dataset, write_dataset, DatasetError};
pub use ensemble::{ensemble_predict, run_inference, validate_spec, EnsembleError, EnsembleSpec};
pub use expc::{ExpC, ExpCConfig};
pub use featurize::{
    featurize_all, featurize_molecule, Augmentation, FeatureError, FeaturizedGraph, LaplaceParams, RbfConfig,
    SpatialMode,
};
pub use graph::{GraphError, HopMatrix, MolecularGraph, Schema};
pub use graphormer::{Graphormer, GraphormerConfig};
pub use model::{Checkpoint, Mode, Model, ModelConfig, ModelError, ModelKind, Regressor};
pub use params::{ParamError, ParameterStore};
pub use profile::Profile;
pub use train::{fit, FitOutput, FoldSelection, TrainConfig, TrainError};

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}
