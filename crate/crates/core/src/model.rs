//! Shared model plumbing: run modes, parameter initialization, the model
//! configuration record and the checkpoint wrapper.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::expc::{ExpC, ExpCConfig};
use crate::featurize::{FeatureError, FeaturizedGraph};
use crate::graphormer::{Graphormer, GraphormerConfig};
use crate::params::{read_container, write_container, ParamError, ParamVars, ParameterStore};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input does not match the model: {0}")]
    Input(String),
    #[error("bad checkpoint config record: {0}")]
    ConfigRecord(#[from] serde_json::Error),
}

/// Whether stochastic layers are active. Training carries the seed from which
/// every dropout mask of one forward pass is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    pub(crate) fn seed(self) -> u64 {
        match self {
            Mode::Eval => 0,
            Mode::Train { seed } => seed,
        }
    }
}

/// One forward-pass input: a featurized graph plus the bond lengths to use for
/// it (possibly augmented).
#[derive(Clone, Copy)]
pub struct GraphInput<'a> {
    pub graph: &'a FeaturizedGraph,
    pub bond_dist: &'a [f64],
}

impl<'a> GraphInput<'a> {
    pub fn clean(graph: &'a FeaturizedGraph) -> Self {
        Self {
            graph,
            bond_dist: &graph.bond_dist,
        }
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on ±1/√fan_in, fan_in being the row count.
    FanIn,
    /// Normal with standard deviation 0.02.
    Embedding,
    /// Uniform on ±√(6 / (rows + cols)).
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn init_store(specs: &[ParamSpec], seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    let mut store = ParameterStore::new();
    for spec in specs {
        let len = spec.size();
        let data: Vec<f64> = match spec.init {
            Init::FanIn => {
                let bound = 1.0 / (spec.shape[0].max(1) as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Embedding => (0..len).map(|_| normal.sample(&mut rng)).collect(),
            Init::Xavier => {
                let fans: usize = spec.shape.iter().take(2).sum();
                let bound = (6.0 / fans.max(1) as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
        };
        let t = Tensor::from_vec(&spec.shape, data).expect("spec shape");
        store.insert(spec.name.clone(), t).expect("unique names");
    }
    store
}

/// A graph-level scalar regressor built on the tape.
pub trait Regressor: Sync {
    fn param_specs(&self) -> Vec<ParamSpec>;

    /// Records the forward pass and returns the `1 × 1` prediction.
    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamVars<'_>,
        input: GraphInput<'_>,
        mode: Mode,
    ) -> Result<Var, ModelError>;

    /// Whether training should perturb bond lengths for this model.
    fn uses_bond_augmentation(&self) -> bool {
        false
    }

    fn init_params(&self, seed: u64) -> ParameterStore {
        init_store(&self.param_specs(), seed)
    }

    fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::size).sum()
    }

    /// Eval-mode prediction for one graph.
    fn predict(&self, params: &ParameterStore, graph: &FeaturizedGraph) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, GraphInput::clean(graph), Mode::Eval)?;
        Ok(tape.value(out).data()[0])
    }
}

pub(crate) fn ensure_finite(tape: &Tape, v: Var, layer: usize) -> Result<(), ModelError> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer })
    }
}

/// Sums categorical embeddings over feature columns: row `i` of the result is
/// `Σ_c table_c[feat[i][c]]`.
pub(crate) fn embed_columns(
    tape: &mut Tape,
    params: &ParamVars<'_>,
    prefix: &str,
    feat: &[Vec<u32>],
    n_cols: usize,
) -> Result<Option<Var>, ModelError> {
    let mut acc: Option<Var> = None;
    for c in 0..n_cols {
        let idx: Vec<usize> = feat.iter().map(|row| row[c] as usize).collect();
        let table = params.get(&format!("{prefix}.{c}"))?;
        let e = tape.gather_rows(table, &idx)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, e)?,
            None => e,
        });
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelConfig {
    Graphormer(GraphormerConfig),
    Expc(ExpCConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Graphormer,
    Expc,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "graphormer" => Ok(ModelKind::Graphormer),
            "expc" => Ok(ModelKind::Expc),
            other => Err(format!("unknown model `{other}`")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Graphormer => "graphormer",
            ModelKind::Expc => "expc",
        })
    }
}

/// Either model behind one concrete type.
#[derive(Debug, Clone)]
pub enum Model {
    Graphormer(Graphormer),
    Expc(ExpC),
}

impl Model {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self, ModelError> {
        Ok(match cfg {
            ModelConfig::Graphormer(c) => Model::Graphormer(Graphormer::new(c.clone())?),
            ModelConfig::Expc(c) => Model::Expc(ExpC::new(c.clone())?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Graphormer(m) => ModelConfig::Graphormer(m.config().clone()),
            Model::Expc(m) => ModelConfig::Expc(m.config().clone()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Graphormer(_) => ModelKind::Graphormer,
            Model::Expc(_) => ModelKind::Expc,
        }
    }
}

impl Regressor for Model {
    fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            Model::Graphormer(m) => m.param_specs(),
            Model::Expc(m) => m.param_specs(),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamVars<'_>,
        input: GraphInput<'_>,
        mode: Mode,
    ) -> Result<Var, ModelError> {
        match self {
            Model::Graphormer(m) => m.forward(tape, params, input, mode),
            Model::Expc(m) => m.forward(tape, params, input, mode),
        }
    }

    fn uses_bond_augmentation(&self) -> bool {
        match self {
            Model::Graphormer(m) => m.uses_bond_augmentation(),
            Model::Expc(m) => m.uses_bond_augmentation(),
        }
    }
}

/// Model configuration plus parameters, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model, ModelError> {
        let model = Model::from_config(&self.config)?;
        let shapes: Vec<(String, Vec<usize>)> = model
            .param_specs()
            .into_iter()
            .map(|s| (s.name, s.shape))
            .collect();
        self.params.check_shapes(&shapes)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let json = serde_json::to_string(&self.config).expect("serializable config");
        write_container(&mut buf, &json, &self.params).expect("in-memory write");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, ModelError> {
        let (json, params) = read_container(&mut bytes)?;
        let config = serde_json::from_str(&json)?;
        Ok(Self { config, params })
    }

    /// Writes the binary container to `path` and a `name<TAB>shape` listing
    /// next to it, named with `.manifest.txt` appended.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path).map_err(ParamError::from)?);
        w.write_all(&self.to_bytes()).map_err(ParamError::from)?;
        w.flush().map_err(ParamError::from)?;
        std::fs::write(manifest_path(path), self.params.manifest()).map_err(ParamError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut r = BufReader::new(File::open(path).map_err(ParamError::from)?);
        let (json, params) = read_container(&mut r)?;
        let config = serde_json::from_str(&json)?;
        Ok(Self { config, params })
    }
}

pub fn manifest_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".manifest.txt");
    s.into()
}
