use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, ExperimentConfig};
use super::data::{PreparedDataset, Split};
use super::model::{EnEcgModel, Mixer, MixerInit};
use crate::error::{Error, Result};
use crate::experts::FeatureScaler;
use crate::gating::GatingNetwork;
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::par::Exec;
use crate::task::{Task, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Self {
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            seed,
        }
    }
}

/// Loss curves of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Entry 0 is the full training-set loss at initialization; entry `e`
    /// is the mean minibatch loss during epoch `e`.
    pub train_loss: Vec<f64>,
    /// Validation loss at initialization and after every epoch.
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
    pub steps: u64,
    pub samples_seen: usize,
    pub wallclock_s: f64,
}

impl TrainLog {
    pub fn train_throughput_sps(&self) -> f64 {
        if self.wallclock_s > 0.0 {
            self.samples_seen as f64 / self.wallclock_s
        } else {
            0.0
        }
    }
}

fn loss_on(model: &EnEcgModel, data: &PreparedDataset, idx: &[usize], exec: Exec) -> Result<f64> {
    let logits = model.predict_logits(data, idx, exec)?;
    model.spec.loss_value(&logits, &data.targets(model.task(), idx))
}

/// What the optimization loop needs from a model.
pub(crate) trait Objective: Clone {
    fn label(&self) -> String;
    fn batch_loss(&self, tape: &mut Tape, data: &PreparedDataset, batch: &[usize]) -> Result<Var>;
    fn full_loss(&self, data: &PreparedDataset, idx: &[usize], exec: Exec) -> Result<f64>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn frozen_checksum(&self) -> String;
}

impl Objective for EnEcgModel {
    fn label(&self) -> String {
        self.task().to_string()
    }

    fn batch_loss(&self, tape: &mut Tape, data: &PreparedDataset, batch: &[usize]) -> Result<Var> {
        let out = self.forward_cached(tape, data, batch)?;
        self.spec.loss(tape, out.combined, &data.targets(self.task(), batch))
    }

    fn full_loss(&self, data: &PreparedDataset, idx: &[usize], exec: Exec) -> Result<f64> {
        loss_on(self, data, idx, exec)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trainable_mut()
    }

    fn frozen_checksum(&self) -> String {
        EnEcgModel::frozen_checksum(self)
    }
}

/// Adam on the model's trainable tensors (head and gate `A`, `B`, bias),
/// keeping the parameters with the lowest validation loss.
pub fn fit(
    model: &mut EnEcgModel,
    data: &PreparedDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    opts: &TrainOptions,
    exec: Exec,
) -> Result<TrainLog> {
    fit_objective(model, data, train_idx, val_idx, opts, exec)
}

pub(crate) fn fit_objective<M: Objective>(
    model: &mut M,
    data: &PreparedDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    opts: &TrainOptions,
    exec: Exec,
) -> Result<TrainLog> {
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::usage("training needs nonempty train and validation splits"));
    }
    if opts.batch_size == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    let start = Instant::now();
    let frozen_before = model.frozen_checksum();
    let label = model.label();
    let mut log = TrainLog {
        train_loss: vec![model.full_loss(data, train_idx, exec)?],
        val_loss: vec![model.full_loss(data, val_idx, exec)?],
        best_epoch: 0,
        steps: 0,
        samples_seen: 0,
        wallclock_s: 0.0,
    };
    let mut best = model.clone();
    let mut adam = AdamState::new(AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "shuffle"));
    let mut order = train_idx.to_vec();
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let step = log.steps + 1;
            let at = || format!("{label} epoch {epoch} step {step}");
            let mut tape = Tape::new();
            let loss = model
                .batch_loss(&mut tape, data, batch)
                .map_err(|e| non_finite_at(e, at()))?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(at()));
            }
            let mut params = model.params_mut();
            tape.backward_into(loss, &mut params).map_err(|e| non_finite_at(e, at()))?;
            adam.step(&mut params)?;
            params.iter_mut().for_each(|p| p.zero_grad());
            if params.iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(at()));
            }
            total += value;
            batches += 1;
            log.steps += 1;
            log.samples_seen += batch.len();
        }
        log.train_loss.push(total / batches as f64);
        let val = model.full_loss(data, val_idx, exec)?;
        log.val_loss.push(val);
        if val < log.val_loss[log.best_epoch] {
            log.best_epoch = epoch;
            best = model.clone();
        }
    }
    *model = best;
    if model.frozen_checksum() != frozen_before {
        return Err(Error::usage("frozen W0 parameters changed during training"));
    }
    log.wallclock_s = start.elapsed().as_secs_f64();
    Ok(log)
}

fn non_finite_at(e: Error, at: String) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{at} ({what})")),
        other => other,
    }
}

/// Fits the task statistics and feature scalers on the training split and
/// builds an untrained model over the selected experts.
pub fn init_model(
    data: &PreparedDataset,
    split: &Split,
    task: Task,
    experts: &[usize],
    mixer: MixerInit,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<EnEcgModel> {
    let spec = TaskSpec::fit(task, &data.targets(task, &split.train), cfg.class_weighting)?;
    let scalers = experts
        .iter()
        .map(|&e| {
            if e >= data.n_experts() {
                return Err(Error::usage(format!("expert index {e} out of range")));
            }
            FeatureScaler::fit(split.train.iter().map(|&i| data.feature_row(e, i)))
        })
        .collect::<Result<Vec<_>>>()?;
    let tag: Vec<String> = experts.iter().map(|e| e.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("init/{task}/{}", tag.join("-"))));
    EnEcgModel::new(spec, experts.to_vec(), scalers, cfg.head, mixer, &mut rng)
}

/// [`init_model`] followed by [`fit`].
pub fn train_task(
    data: &PreparedDataset,
    split: &Split,
    task: Task,
    experts: &[usize],
    mixer: MixerInit,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(EnEcgModel, TrainLog)> {
    let mut model = init_model(data, split, task, experts, mixer, cfg, seed)?;
    let opts = TrainOptions::from_config(cfg, derive_seed(seed, &format!("fit/{task}/{}", experts.len())));
    let log = fit(&mut model, data, &split.train, &split.val, &opts, cfg.exec)?;
    Ok((model, log))
}

/// One model per expert over the same task, each a single head with weight 1.
pub fn train_singles(
    data: &PreparedDataset,
    split: &Split,
    task: Task,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<(EnEcgModel, TrainLog)>> {
    (0..data.n_experts())
        .map(|e| train_task(data, split, task, &[e], MixerInit::Fixed(vec![1.0]), cfg, seed))
        .collect()
}

/// Puts the heads of single-expert models side by side under `mixer`.
pub fn assemble(singles: &[EnEcgModel], mixer: Mixer) -> Result<EnEcgModel> {
    let first = singles.first().ok_or_else(|| Error::usage("no single-expert models"))?;
    let spec = first.spec;
    let n = singles.len();
    let mut model = EnEcgModel {
        spec,
        experts: Vec::with_capacity(n),
        scalers: Vec::with_capacity(n),
        head_config: first.head_config,
        heads: Vec::with_capacity(n),
        mixer,
    };
    for s in singles {
        if s.spec != spec || s.n_experts() != 1 || s.head_config != first.head_config {
            return Err(Error::usage("single-expert models disagree on the task"));
        }
        model.experts.push(s.experts[0]);
        model.scalers.push(s.scalers[0].clone());
        model.heads.push(s.heads[0].clone());
    }
    let ok = match &model.mixer {
        Mixer::Fixed(w) => w.len() == n,
        Mixer::Gate(g) => g.n_experts() == n && g.out_dim() == spec.out_dim(),
    };
    if !ok {
        return Err(Error::usage("mixer does not match the number of experts"));
    }
    Ok(model)
}

/// The gated ensemble over every expert. With `cfg.warm_start` the heads
/// start from `singles` (trained here when not given) and are then trained
/// jointly with the gate; otherwise heads and gate start fresh.
pub fn train_moe(
    data: &PreparedDataset,
    split: &Split,
    task: Task,
    cfg: &ExperimentConfig,
    seed: u64,
    singles: Option<&[EnEcgModel]>,
) -> Result<(EnEcgModel, TrainLog)> {
    let all: Vec<usize> = (0..data.n_experts()).collect();
    if !cfg.warm_start {
        return train_task(data, split, task, &all, MixerInit::Gate(cfg.gate.clone()), cfg, seed);
    }
    let owned;
    let singles = match singles {
        Some(s) => s,
        None => {
            owned = train_singles(data, split, task, cfg, seed)?
                .into_iter()
                .map(|(m, _)| m)
                .collect::<Vec<_>>();
            &owned
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("init/{task}/gate")));
    let gate = GatingNetwork::new(cfg.gate.clone(), singles.len(), task.out_dim(), &mut rng)?;
    let mut model = assemble(singles, Mixer::Gate(gate))?;
    let opts = TrainOptions::from_config(cfg, derive_seed(seed, &format!("fit/{task}/moe")));
    let log = fit(&mut model, data, &split.train, &split.val, &opts, cfg.exec)?;
    Ok((model, log))
}
