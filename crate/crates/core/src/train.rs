//! Optimization and experiment protocol: MAE loss, Adam, learning-rate
//! schedules, gradient clipping, fold plans and the training loop.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::featurize::{augmentation_seed, Augmentation, FeatureError, FeaturizedGraph};
use crate::model::{Checkpoint, GraphInput, Mode, Model, ModelError, Regressor};
use crate::params::ParameterStore;
use crate::seed::mix_seed;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{pred} predictions for {target} targets")]
    LengthMismatch { pred: usize, target: usize },
    #[error("step {step} outside [0, {max}]")]
    StepOutOfRange { step: u64, max: u64 },
    #[error("cannot split {ids} ids into {folds} folds")]
    FoldCount { folds: usize, ids: usize },
    #[error("duplicate molecule id `{0}`")]
    DuplicateId(String),
    #[error("fold {fold} out of range for {n_folds} folds")]
    Fold { fold: usize, n_folds: usize },
    #[error("non-finite loss at step {step} (batch {ids:?})")]
    NonFiniteLoss { step: u64, ids: Vec<String> },
    #[error("non-finite gradient norm")]
    NonFiniteGrad,
    #[error("gradient for parameter {index} has shape {actual:?}, expected {expected:?}")]
    GradShape {
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("molecule `{0}` has no target")]
    MissingTarget(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Mean absolute error. Ties contribute zero subgradient wherever this is
/// differentiated on the tape.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Tape form of [`mae`] over a column or row of predictions.
pub fn mae_loss(tape: &mut Tape, pred: crate::autodiff::Var, target: &Tensor) -> Result<crate::autodiff::Var, TrainError> {
    if tape.value(pred).is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let t = tape.leaf(target.clone());
    let diff = tape.sub(pred, t).map_err(ModelError::from)?;
    let a = tape.abs(diff);
    Ok(tape.mean(a).map_err(ModelError::from)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction; `eps` is added to `√v̂`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParameterStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParameterStore, grads: &[Tensor], lr: f64) -> Result<(), TrainError> {
        if grads.len() != params.len() {
            return Err(TrainError::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensor(i).shape() {
                return Err(TrainError::GradShape {
                    index: i,
                    expected: params.tensor(i).shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGrad);
            }
        }
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k] + weight_decay * p[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64, TrainError> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGrad);
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphormerTrainConfig {
    pub max_steps: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub grad_clip_norm: f64,
    pub eval_interval: u64,
    pub augmentation: Augmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpCTrainConfig {
    pub max_epochs: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub adam: AdamConfig,
    pub lr_decay_rate: f64,
    pub lr_decay_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "kebab-case")]
pub enum TrainConfig {
    Graphormer(GraphormerTrainConfig),
    Expc(ExpCTrainConfig),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        match self {
            TrainConfig::Graphormer(c) => {
                if c.max_steps > 0 && c.warmup_steps >= c.max_steps {
                    return err("warmup_steps must be below max_steps");
                }
                if c.batch_size == 0 || c.eval_interval == 0 || c.peak_lr <= 0.0 || c.grad_clip_norm <= 0.0 {
                    return err("batch_size, eval_interval, peak_lr and grad_clip_norm must be positive");
                }
            }
            TrainConfig::Expc(c) => {
                if !(c.lr_decay_rate > 0.0 && c.lr_decay_rate <= 1.0) {
                    return err("lr_decay_rate must lie in (0, 1]");
                }
                if c.lr_decay_step == 0 || c.batch_size == 0 || c.peak_lr <= 0.0 {
                    return err("lr_decay_step, batch_size and peak_lr must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        match self {
            TrainConfig::Graphormer(c) => c.batch_size,
            TrainConfig::Expc(c) => c.batch_size,
        }
    }
}

/// Linear warm-up from 0 to the peak over `warmup_steps`, then linear decay to
/// 0 at `max_steps`.
pub fn lr_linear_warmup_decay(step: u64, cfg: &GraphormerTrainConfig) -> Result<f64, TrainError> {
    if step > cfg.max_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            max: cfg.max_steps,
        });
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return Ok(cfg.peak_lr);
        }
        return Ok(step as f64 / cfg.warmup_steps as f64 * cfg.peak_lr);
    }
    let left = (cfg.max_steps - step) as f64 / (cfg.max_steps - cfg.warmup_steps) as f64;
    Ok(left * cfg.peak_lr)
}

/// `peak · rate^⌊epoch / step⌋`, rounded to 12 significant digits so decimal
/// schedule values come out exact.
pub fn lr_step_decay(epoch: u64, cfg: &ExpCTrainConfig) -> f64 {
    let k = (epoch / cfg.lr_decay_step) as i32;
    let lr = cfg.peak_lr * cfg.lr_decay_rate.powi(k);
    format!("{lr:.11e}").parse().expect("formatted float")
}

/// Assignment of molecules to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    /// Fold of each id, aligned with the ids passed to [`kfold_split`].
    pub assignment: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldSelection {
    /// Validate on this fold, train on the rest.
    Fold(usize),
    /// Train on everything; no validation.
    All,
}

impl std::str::FromStr for FoldSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(FoldSelection::All);
        }
        s.parse()
            .map(FoldSelection::Fold)
            .map_err(|_| format!("fold must be an index or `all`, got `{s}`"))
    }
}

impl std::fmt::Display for FoldSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FoldSelection::Fold(k) => write!(f, "{k}"),
            FoldSelection::All => f.write_str("all"),
        }
    }
}

/// Index sets for one run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Split {
    pub fn all(n: usize) -> Self {
        Self {
            train: (0..n).collect(),
            val: Vec::new(),
        }
    }
}

impl FoldPlan {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        self.assignment.iter().for_each(|&f| sizes[f] += 1);
        sizes
    }

    pub fn split(&self, sel: FoldSelection) -> Result<Split, TrainError> {
        match sel {
            FoldSelection::All => Ok(Split::all(self.assignment.len())),
            FoldSelection::Fold(k) if k < self.n_folds => {
                let (val, train): (Vec<usize>, Vec<usize>) =
                    (0..self.assignment.len()).partition(|&i| self.assignment[i] == k);
                Ok(Split { train, val })
            }
            FoldSelection::Fold(k) => Err(TrainError::Fold {
                fold: k,
                n_folds: self.n_folds,
            }),
        }
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn kfold_split(ids: &[String], n_folds: usize, seed: u64) -> Result<FoldPlan, TrainError> {
    if n_folds == 0 || n_folds > ids.len() {
        return Err(TrainError::FoldCount {
            folds: n_folds,
            ids: ids.len(),
        });
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(TrainError::DuplicateId(dup.clone()));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; ids.len()];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % n_folds;
    }
    Ok(FoldPlan { n_folds, assignment })
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Mean batch loss since the previous record.
    pub train_loss: Option<f64>,
    /// Eval-mode MAE over the whole training split.
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricRecord>,
    pub best_val_mae: Option<f64>,
    pub steps: u64,
}

pub(crate) fn thread_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

/// Eval-mode predictions in input order.
pub fn predict_all(
    model: &Model,
    params: &ParameterStore,
    data: &[FeaturizedGraph],
    workers: usize,
) -> Result<Vec<f64>, ModelError> {
    thread_pool(workers).install(|| data.par_iter().map(|g| model.predict(params, g)).collect())
}

fn targets(data: &[FeaturizedGraph], idx: &[usize]) -> Result<Vec<f64>, TrainError> {
    idx.iter()
        .map(|&i| data[i].target.ok_or_else(|| TrainError::MissingTarget(data[i].id.clone())))
        .collect()
}

fn subset_mae(
    model: &Model,
    params: &ParameterStore,
    data: &[FeaturizedGraph],
    idx: &[usize],
    pool: &rayon::ThreadPool,
) -> Result<f64, TrainError> {
    let t = targets(data, idx)?;
    let p: Vec<f64> = pool.install(|| {
        idx.par_iter()
            .map(|&i| model.predict(params, &data[i]))
            .collect::<Result<_, _>>()
    })?;
    mae(&p, &t)
}

/// Deterministic eval-mode MAE of a checkpoint.
pub fn evaluate_mae(ckpt: &Checkpoint, data: &[FeaturizedGraph], workers: usize) -> Result<f64, TrainError> {
    let model = ckpt.model()?;
    let all: Vec<usize> = (0..data.len()).collect();
    subset_mae(&model, &ckpt.params, data, &all, &thread_pool(workers))
}

struct GraphGrad {
    loss: f64,
    grads: Vec<Tensor>,
}

fn graph_grad(
    model: &Model,
    params: &ParameterStore,
    g: &FeaturizedGraph,
    bond_dist: &[f64],
    mode: Mode,
) -> Result<GraphGrad, TrainError> {
    let target = g.target.ok_or_else(|| TrainError::MissingTarget(g.id.clone()))?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let input = GraphInput { graph: g, bond_dist };
    let pred = model.forward(&mut tape, &vars, input, mode)?;
    let loss = mae_loss(&mut tape, pred, &Tensor::full(&[1, 1], target))?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss).map_err(ModelError::from)?;
    Ok(GraphGrad {
        loss: value,
        grads: vars.grads(&tape),
    })
}

/// Schedule position handed to the learning-rate rule.
#[derive(Clone, Copy)]
struct Clock {
    step: u64,
    epoch: u64,
}

struct Recorder<'a> {
    model: &'a Model,
    data: &'a [FeaturizedGraph],
    split: &'a Split,
    pool: &'a rayon::ThreadPool,
    log: Vec<MetricRecord>,
    best: Option<(f64, ParameterStore)>,
    on_record: &'a mut dyn FnMut(&MetricRecord),
    loss_sum: f64,
    loss_count: usize,
}

impl Recorder<'_> {
    fn record(&mut self, clock: Clock, lr: f64, params: &ParameterStore) -> Result<(), TrainError> {
        let train_mae = subset_mae(self.model, params, self.data, &self.split.train, self.pool)?;
        let val_mae = if self.split.val.is_empty() {
            None
        } else {
            Some(subset_mae(self.model, params, self.data, &self.split.val, self.pool)?)
        };
        if let Some(v) = val_mae {
            if self.best.as_ref().is_none_or(|(b, _)| v < *b) {
                self.best = Some((v, params.clone()));
            }
        }
        let rec = MetricRecord {
            step: clock.step,
            epoch: clock.epoch,
            lr,
            train_loss: (self.loss_count > 0).then(|| self.loss_sum / self.loss_count as f64),
            train_mae,
            val_mae,
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        (self.on_record)(&rec);
        self.log.push(rec);
        Ok(())
    }
}

/// Trains `model` from a seeded initialization.
///
/// Batches are reshuffled every epoch. Within a step, graphs run on separate
/// tapes (possibly on several workers) and their gradients are averaged in
/// batch order, so results do not depend on `workers`. Fold runs keep the
/// parameters with the best validation MAE; runs without a validation split
/// keep the final parameters. `on_record` sees each metric record as it is
/// produced.
pub fn fit(
    model: &Model,
    data: &[FeaturizedGraph],
    split: &Split,
    cfg: &TrainConfig,
    seed: u64,
    workers: usize,
    on_record: &mut dyn FnMut(&MetricRecord),
) -> Result<FitOutput, TrainError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    targets(data, &split.train)?;
    targets(data, &split.val)?;
    let pool = thread_pool(workers);
    let mut params = model.init_params(seed);
    let mut adam = Adam::new(
        match cfg {
            TrainConfig::Graphormer(c) => c.adam,
            TrainConfig::Expc(c) => c.adam,
        },
        &params,
    );
    let augmentation = match cfg {
        TrainConfig::Graphormer(c) if model.uses_bond_augmentation() => c.augmentation,
        _ => Augmentation::Off,
    };
    let batch_size = cfg.batch_size();
    let mut rec = Recorder {
        model,
        data,
        split,
        pool: &pool,
        log: Vec::new(),
        best: None,
        on_record,
        loss_sum: 0.0,
        loss_count: 0,
    };
    let mut clock = Clock { step: 0, epoch: 0 };

    let (max_steps, max_epochs) = match cfg {
        TrainConfig::Graphormer(c) => (Some(c.max_steps), None),
        TrainConfig::Expc(c) => (None, Some(c.max_epochs)),
    };
    let mut last_lr = match cfg {
        TrainConfig::Graphormer(c) => lr_linear_warmup_decay(0, c)?,
        TrainConfig::Expc(c) => lr_step_decay(0, c),
    };
    let mut last_recorded = None;

    'epochs: loop {
        if max_epochs.is_some_and(|e| clock.epoch >= e) || max_steps.is_some_and(|s| clock.step >= s) {
            break;
        }
        let mut order = split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5348_5546, clock.epoch])));
        for batch in order.chunks(batch_size) {
            if max_steps.is_some_and(|s| clock.step >= s) {
                break 'epochs;
            }
            clock.step += 1;
            let lr = match cfg {
                TrainConfig::Graphormer(c) => lr_linear_warmup_decay(clock.step, c)?,
                TrainConfig::Expc(c) => lr_step_decay(clock.epoch, c),
            };
            last_lr = lr;

            let results: Vec<Result<GraphGrad, TrainError>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let g = &data[i];
                        let mut rng = ChaCha8Rng::seed_from_u64(augmentation_seed(seed, &g.id, clock.epoch));
                        let bond = g.augmented_bond_dist(&augmentation, &mut rng)?;
                        let mode = Mode::Train {
                            seed: mix_seed(&[seed, clock.step, i as u64]),
                        };
                        graph_grad(model, &params, g, &bond, mode)
                    })
                    .collect()
            });
            let mut total: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let gg = r?;
                batch_loss += gg.loss;
                match total.as_mut() {
                    None => total = Some(gg.grads),
                    Some(acc) => acc.iter_mut().zip(&gg.grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let n = batch.len() as f64;
            batch_loss /= n;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: clock.step,
                    ids: batch.iter().map(|&i| data[i].id.clone()).collect(),
                });
            }
            let mut grads = total.expect("non-empty batch");
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|x| *x /= n));
            if let TrainConfig::Graphormer(c) = cfg {
                clip_grad_norm(&mut grads, c.grad_clip_norm)?;
            }
            adam.step(&mut params, &grads, lr)?;
            rec.loss_sum += batch_loss;
            rec.loss_count += 1;

            if let TrainConfig::Graphormer(c) = cfg {
                if clock.step.is_multiple_of(c.eval_interval) {
                    rec.record(clock, lr, &params)?;
                    last_recorded = Some(clock.step);
                }
            }
        }
        clock.epoch += 1;
        if matches!(cfg, TrainConfig::Expc(_)) {
            let at = Clock {
                step: clock.step,
                epoch: clock.epoch - 1,
            };
            rec.record(at, last_lr, &params)?;
            last_recorded = Some(clock.step);
        }
    }
    if last_recorded != Some(clock.step) || rec.log.is_empty() {
        let at = Clock {
            step: clock.step,
            epoch: clock.epoch.saturating_sub(u64::from(clock.step > 0 && matches!(cfg, TrainConfig::Expc(_)))),
        };
        rec.record(at, last_lr, &params)?;
    }

    let log = rec.log;
    let (best_val_mae, params) = match rec.best {
        Some((v, p)) => (Some(v), p),
        None => (None, params),
    };
    Ok(FitOutput {
        checkpoint: Checkpoint {
            config: model.config(),
            params,
        },
        log,
        best_val_mae,
        steps: clock.step,
    })
}
