//! Every task at once: per-task heads over shared experts and one gate
//! whose output is sliced per task.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{derive_seed, ExperimentConfig};
use super::data::{PreparedDataset, Split};
use super::evaluate::{median, Efficiency, Evaluation};
use super::model::{join, read_gate_config, split_list, write_gate_config, BatchOutput, EnEcgModel, Mixer, MixerInit, EVAL_CHUNK};
use super::train::{assemble, fit_objective, init_model, train_singles, Objective, TrainLog, TrainOptions};
use crate::adapters::Checkpoint;
use crate::error::{Error, Result};
use crate::experts::ExpertModel;
use crate::gating::{ensemble_combine, GateConfig, GatingNetwork};
use crate::numerics::{checksum_all, Tape, Tensor, Var};
use crate::par::{chunks, try_map_range, Exec};
use crate::task::Task;

/// Per-task heads plus one gate producing `[b, N, ΣL]` weights.
#[derive(Debug, Clone)]
pub struct JointModel {
    /// One model per task; only their scalers and heads are used.
    pub members: Vec<EnEcgModel>,
    pub gate: GatingNetwork,
    offsets: Vec<usize>,
}

fn offsets(members: &[EnEcgModel]) -> Vec<usize> {
    let mut o = Vec::with_capacity(members.len() + 1);
    o.push(0);
    for m in members {
        o.push(o.last().unwrap() + m.out_dim());
    }
    o
}

impl JointModel {
    pub fn new(members: Vec<EnEcgModel>, gate: GatingNetwork) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::usage("joint model needs at least one task"))?;
        for m in &members {
            if m.experts != first.experts {
                return Err(Error::usage("joint members must share the expert set"));
            }
        }
        for (i, m) in members.iter().enumerate() {
            if members[..i].iter().any(|o| o.task() == m.task()) {
                return Err(Error::usage(format!("task {} appears twice", m.task())));
            }
        }
        let offsets = offsets(&members);
        if gate.n_experts() != first.n_experts() || gate.out_dim() != offsets[members.len()] {
            return Err(Error::usage(format!(
                "shared gate must output {} experts × {} coordinates",
                first.n_experts(),
                offsets[members.len()]
            )));
        }
        Ok(Self { members, gate, offsets })
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.members.iter().map(EnEcgModel::task).collect()
    }

    pub fn member_index(&self, task: Task) -> Result<usize> {
        self.members
            .iter()
            .position(|m| m.task() == task)
            .ok_or_else(|| Error::usage(format!("task {task} is not part of the joint model")))
    }

    /// One output per task, in member order.
    pub fn forward_cached(&self, tape: &mut Tape, data: &PreparedDataset, idx: &[usize]) -> Result<Vec<BatchOutput>> {
        if self.gate.input_dim() != data.gate_dim {
            return Err(Error::usage("shared gate does not match the dataset gate input"));
        }
        if idx.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let rows = idx.iter().flat_map(|&i| data.gate_row(i).iter().copied()).collect();
        let x = tape.constant(&[idx.len(), data.gate_dim], rows)?;
        let w = self.gate.forward(tape, x)?;
        let mut outs = Vec::with_capacity(self.members.len());
        for (t, m) in self.members.iter().enumerate() {
            let logits = m.head_logits_cached(tape, data, idx)?;
            let weights = tape.slice(w, 2, self.offsets[t], self.offsets[t + 1])?;
            let combined = ensemble_combine(tape, logits, weights)?;
            outs.push(BatchOutput {
                logits,
                weights,
                combined,
            });
        }
        Ok(outs)
    }

    /// Combined logits of member `t` for `idx`, in chunks.
    pub fn predict_logits(&self, t: usize, data: &PreparedDataset, idx: &[usize], exec: Exec) -> Result<Vec<f64>> {
        Ok(self.predict_all(data, idx, exec)?.swap_remove(t))
    }

    /// Combined logits of every member for `idx`.
    pub fn predict_all(&self, data: &PreparedDataset, idx: &[usize], exec: Exec) -> Result<Vec<Vec<f64>>> {
        let parts = chunks(idx.len(), EVAL_CHUNK);
        let per_chunk = try_map_range(exec, parts.len(), |c| {
            let mut tape = Tape::new();
            let outs = self.forward_cached(&mut tape, data, &idx[parts[c].clone()])?;
            Ok::<_, Error>(outs.iter().map(|o| tape.value(o.combined).to_vec()).collect::<Vec<_>>())
        })?;
        let mut all = vec![Vec::new(); self.members.len()];
        for chunk in per_chunk {
            for (dst, part) in all.iter_mut().zip(chunk) {
                dst.extend(part);
            }
        }
        Ok(all)
    }

    pub fn trainable_count(&self) -> usize {
        self.members.iter().map(EnEcgModel::trainable_count).sum::<usize>() + self.gate.trainable_count()
    }

    pub fn full_count(&self) -> usize {
        self.members.iter().map(EnEcgModel::full_count).sum::<usize>() + self.gate.full_count()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("tasks", join(&self.tasks()));
        write_gate_config(&mut ck, &self.gate.config);
        self.gate.write_checkpoint(&mut ck, "gate");
        for m in &self.members {
            let sub = m.to_checkpoint();
            let p = m.task();
            for (k, v) in sub.meta {
                ck.meta.insert(format!("{p}/{k}"), v);
            }
            for (k, v) in sub.tensors {
                ck.tensors.insert(format!("{p}/{k}"), v);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let tasks: Vec<Task> = split_list(ck.meta_value("tasks")?)?;
        let mut members = Vec::with_capacity(tasks.len());
        for t in &tasks {
            let prefix = format!("{t}/");
            let mut sub = Checkpoint::new();
            for (k, v) in &ck.meta {
                if let Some(rest) = k.strip_prefix(&prefix) {
                    sub.meta.insert(rest.to_string(), v.clone());
                }
            }
            for (k, v) in &ck.tensors {
                if let Some(rest) = k.strip_prefix(&prefix) {
                    sub.tensors.insert(rest.to_string(), v.clone());
                }
            }
            members.push(EnEcgModel::from_checkpoint(&sub)?);
        }
        let first = members.first().ok_or_else(|| Error::usage("joint checkpoint lists no tasks"))?;
        let total: usize = members.iter().map(EnEcgModel::out_dim).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut gate = GatingNetwork::new(read_gate_config(ck)?, first.n_experts(), total, &mut rng)?;
        gate.read_checkpoint(ck, "gate")?;
        Self::new(members, gate)
    }
}

impl Objective for JointModel {
    fn label(&self) -> String {
        "joint".into()
    }

    fn batch_loss(&self, tape: &mut Tape, data: &PreparedDataset, batch: &[usize]) -> Result<Var> {
        let outs = self.forward_cached(tape, data, batch)?;
        let mut total: Option<Var> = None;
        for (m, o) in self.members.iter().zip(outs) {
            let l = m.spec.loss(tape, o.combined, &data.targets(m.task(), batch))?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(total.expect("at least one member"))
    }

    fn full_loss(&self, data: &PreparedDataset, idx: &[usize], exec: Exec) -> Result<f64> {
        let all = self.predict_all(data, idx, exec)?;
        self.members
            .iter()
            .zip(&all)
            .map(|(m, z)| m.spec.loss_value(z, &data.targets(m.task(), idx)))
            .sum()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.members.iter_mut().flat_map(EnEcgModel::trainable_mut).collect();
        v.extend(self.gate.trainable_mut());
        v
    }

    fn frozen_checksum(&self) -> String {
        let mut w0: Vec<&Tensor> = Vec::new();
        for m in &self.members {
            for h in &m.heads {
                w0.extend(h.layers.iter().filter(|l| !l.w0.requires_grad()).map(|l| &l.w0));
            }
        }
        w0.extend(self.gate.layers.iter().filter(|l| !l.w0.requires_grad()).map(|l| &l.w0));
        checksum_all(w0)
    }
}

fn shared_gate(cfg: &GateConfig, n: usize, total: usize, seed: u64) -> Result<GatingNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/joint/gate"));
    GatingNetwork::new(cfg.clone(), n, total, &mut rng)
}

/// Builds the joint model for `cfg.tasks` and fits it on the summed task
/// losses. With `cfg.warm_start` each task's heads start from its
/// independently fine-tuned single-expert models.
pub fn train_joint(
    data: &PreparedDataset,
    split: &Split,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(JointModel, TrainLog)> {
    let n = data.n_experts();
    let all: Vec<usize> = (0..n).collect();
    let mut members = Vec::with_capacity(cfg.tasks.len());
    for &task in &cfg.tasks {
        let uniform = vec![1.0 / n as f64; n];
        let m = if cfg.warm_start {
            let singles: Vec<EnEcgModel> = train_singles(data, split, task, cfg, seed)?.into_iter().map(|(m, _)| m).collect();
            assemble(&singles, Mixer::Fixed(uniform))?
        } else {
            init_model(data, split, task, &all, MixerInit::Fixed(uniform), cfg, seed)?
        };
        members.push(m);
    }
    let total: usize = members.iter().map(EnEcgModel::out_dim).sum();
    let gate = shared_gate(&cfg.gate, n, total, seed)?;
    let mut model = JointModel::new(members, gate)?;
    let opts = TrainOptions::from_config(cfg, derive_seed(seed, "fit/joint"));
    let log = fit_objective(&mut model, data, &split.train, &split.val, &opts, cfg.exec)?;
    Ok((model, log))
}

/// Test metrics of every member, in member order.
pub fn evaluate_joint(model: &JointModel, data: &PreparedDataset, idx: &[usize], exec: Exec) -> Result<Vec<Evaluation>> {
    if idx.is_empty() {
        return Err(Error::usage("cannot evaluate an empty split"));
    }
    let all = model.predict_all(data, idx, exec)?;
    model
        .members
        .iter()
        .zip(&all)
        .map(|(m, z)| {
            let targets = data.targets(m.task(), idx);
            Ok(Evaluation {
                metric: m.spec.metric(),
                value: m.spec.score(z, &targets)?,
                loss: m.spec.loss_value(z, &targets)?,
                n: idx.len(),
            })
        })
        .collect()
}

/// Parameter counts and cached-feature throughput of a joint model; the
/// shared experts are counted once.
pub fn bench_joint_cached(
    model: &JointModel,
    roster: &[ExpertModel],
    data: &PreparedDataset,
    idx: &[usize],
    exec: Exec,
    passes: usize,
) -> Result<Efficiency> {
    if idx.is_empty() {
        return Err(Error::usage("bench needs at least one record"));
    }
    let params_expert: usize = model.members[0]
        .experts
        .iter()
        .filter_map(|&e| roster.get(e))
        .map(ExpertModel::param_count)
        .sum();
    let params_trainable = model.trainable_count();
    let params_frozen = model.members.iter().map(EnEcgModel::frozen_count).sum::<usize>()
        + model.gate.frozen_count()
        + params_expert;
    let params_full_ffn = model.full_count();
    let mut tape = Tape::new();
    model.forward_cached(&mut tape, data, &idx[..1])?;
    let activation_bytes = tape.activation_bytes();
    let passes = passes.max(3);
    let mut rates = Vec::with_capacity(passes);
    for _ in 0..passes {
        let t0 = Instant::now();
        model.predict_all(data, idx, exec)?;
        rates.push(idx.len() as f64 / t0.elapsed().as_secs_f64().max(1e-9));
    }
    Ok(Efficiency {
        params_trainable,
        params_frozen,
        params_total: params_trainable + params_frozen,
        params_expert,
        params_full_ffn,
        lora_fraction: params_trainable as f64 / params_full_ffn as f64,
        throughput_sps: median(rates),
        passes,
        activation_bytes,
    })
}
