//! Named configurations. `paper` carries the full-scale hyper-parameters
//! verbatim; `mini` is the desk-scale variant used by tests and smoke runs.

use serde::{Deserialize, Serialize};

use crate::expc::ExpCConfig;
use crate::featurize::{Augmentation, LaplaceParams, RbfConfig, SpatialMode};
use crate::graph::Schema;
use crate::graphormer::GraphormerConfig;
use crate::model::{ModelConfig, ModelKind};
use crate::train::{AdamConfig, ExpCTrainConfig, GraphormerTrainConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Paper,
    Mini,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "mini" => Ok(Profile::Mini),
            other => Err(format!("unknown profile `{other}`")),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Mini => "mini",
        })
    }
}

/// Categorical schema of the full-scale embedding tables: 9 atom and 3 bond
/// columns with 512 buckets each, and 512 degree buckets.
pub fn paper_schema() -> Schema {
    Schema {
        atom_vocab: vec![512; 9],
        bond_vocab: vec![512; 3],
    }
}

pub fn graphormer_paper(schema: Schema) -> GraphormerConfig {
    GraphormerConfig {
        n_layers: 12,
        hidden_dim: 768,
        ffn_dim: 768,
        n_heads: 32,
        head_dim: 24,
        ffn_dropout: 0.1,
        attn_dropout: 0.1,
        embed_dropout: 0.0,
        rbf: RbfConfig::default(),
        spatial_mode: SpatialMode::EuclideanRbf,
        max_hop: 20,
        degree_buckets: 512,
        schema,
    }
}

/// Eight kernels over [0, 4] Å, covering bonds and near neighbors.
pub fn mini_rbf() -> RbfConfig {
    RbfConfig::over_range(8, 0.0, 4.0)
}

pub fn graphormer_mini(schema: Schema) -> GraphormerConfig {
    GraphormerConfig {
        n_layers: 2,
        hidden_dim: 16,
        ffn_dim: 16,
        n_heads: 4,
        head_dim: 4,
        ffn_dropout: 0.0,
        attn_dropout: 0.0,
        embed_dropout: 0.0,
        rbf: mini_rbf(),
        spatial_mode: SpatialMode::EuclideanRbf,
        max_hop: 20,
        degree_buckets: 16,
        schema,
    }
}

pub fn expc_paper(schema: Schema) -> ExpCConfig {
    ExpCConfig {
        n_layers: 5,
        hidden_dim: 600,
        expanded_dim: 1200,
        dropout: 0.0,
        schema,
    }
}

pub fn expc_mini(schema: Schema) -> ExpCConfig {
    ExpCConfig {
        n_layers: 2,
        hidden_dim: 8,
        expanded_dim: 16,
        dropout: 0.0,
        schema,
    }
}

pub fn graphormer_train_paper() -> GraphormerTrainConfig {
    GraphormerTrainConfig {
        max_steps: 1_500_000,
        peak_lr: 2e-4,
        batch_size: 1024,
        warmup_steps: 10_000,
        adam: AdamConfig::default(),
        grad_clip_norm: 5.0,
        eval_interval: 500,
        augmentation: Augmentation::Laplace(LaplaceParams::default()),
    }
}

pub fn graphormer_train_mini() -> GraphormerTrainConfig {
    GraphormerTrainConfig {
        max_steps: 2000,
        peak_lr: 3e-3,
        batch_size: 16,
        warmup_steps: 100,
        adam: AdamConfig::default(),
        grad_clip_norm: 5.0,
        eval_interval: 500,
        augmentation: Augmentation::Laplace(LaplaceParams::default()),
    }
}

pub fn expc_train_paper() -> ExpCTrainConfig {
    ExpCTrainConfig {
        max_epochs: 100,
        batch_size: 256,
        peak_lr: 1e-4,
        adam: AdamConfig::default(),
        lr_decay_rate: 0.75,
        lr_decay_step: 20,
    }
}

pub fn expc_train_mini() -> ExpCTrainConfig {
    ExpCTrainConfig {
        max_epochs: 200,
        batch_size: 8,
        peak_lr: 5e-3,
        adam: AdamConfig::default(),
        lr_decay_rate: 0.75,
        lr_decay_step: 30,
    }
}

pub fn model_config(kind: ModelKind, profile: Profile, schema: Schema) -> ModelConfig {
    match (kind, profile) {
        (ModelKind::Graphormer, Profile::Paper) => ModelConfig::Graphormer(graphormer_paper(schema)),
        (ModelKind::Graphormer, Profile::Mini) => ModelConfig::Graphormer(graphormer_mini(schema)),
        (ModelKind::Expc, Profile::Paper) => ModelConfig::Expc(expc_paper(schema)),
        (ModelKind::Expc, Profile::Mini) => ModelConfig::Expc(expc_mini(schema)),
    }
}

pub fn train_config(kind: ModelKind, profile: Profile) -> TrainConfig {
    match (kind, profile) {
        (ModelKind::Graphormer, Profile::Paper) => TrainConfig::Graphormer(graphormer_train_paper()),
        (ModelKind::Graphormer, Profile::Mini) => TrainConfig::Graphormer(graphormer_train_mini()),
        (ModelKind::Expc, Profile::Paper) => TrainConfig::Expc(expc_train_paper()),
        (ModelKind::Expc, Profile::Mini) => TrainConfig::Expc(expc_train_mini()),
    }
}
