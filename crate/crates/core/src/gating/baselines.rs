use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ensemble_combine, GateConfig, GatingNetwork};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Tape};
use crate::task::{TaskKind, TaskSpec};

/// Frozen logits of every expert over a split, laid out `[n, N, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertLogits {
    pub n: usize,
    pub n_experts: usize,
    pub out_dim: usize,
    pub data: Vec<f64>,
}

impl ExpertLogits {
    /// `per_expert[i]` holds expert `i`'s `[n, L]` logits row-major.
    pub fn from_experts(per_expert: &[Vec<f64>], out_dim: usize) -> Result<Self> {
        let n_experts = per_expert.len();
        if n_experts == 0 || out_dim == 0 {
            return Err(Error::usage("need at least one expert and one output"));
        }
        let len = per_expert[0].len();
        if !len.is_multiple_of(out_dim) || per_expert.iter().any(|e| e.len() != len) {
            return Err(Error::dim("expert logit matrices differ in shape"));
        }
        let n = len / out_dim;
        let mut data = Vec::with_capacity(n * n_experts * out_dim);
        for s in 0..n {
            for e in per_expert {
                data.extend_from_slice(&e[s * out_dim..(s + 1) * out_dim]);
            }
        }
        Ok(Self {
            n,
            n_experts,
            out_dim,
            data,
        })
    }

    /// Expert `i`'s `[n, L]` logits.
    pub fn expert(&self, i: usize) -> Vec<f64> {
        let (ne, l) = (self.n_experts, self.out_dim);
        (0..self.n)
            .flat_map(|s| self.data[(s * ne + i) * l..(s * ne + i + 1) * l].iter().copied())
            .collect()
    }

    /// `[N, L]` block of sample `s`.
    pub fn sample(&self, s: usize) -> &[f64] {
        let w = self.n_experts * self.out_dim;
        &self.data[s * w..(s + 1) * w]
    }

    /// Combined `[n, L]` logits under one weight per expert.
    pub fn combine_static(&self, weights: &[f64]) -> Vec<f64> {
        let (ne, l) = (self.n_experts, self.out_dim);
        let mut out = vec![0.0; self.n * l];
        for s in 0..self.n {
            for (i, w) in weights.iter().enumerate() {
                for j in 0..l {
                    out[s * l + j] += w * self.data[(s * ne + i) * l + j];
                }
            }
        }
        out
    }

    fn rows(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&s| self.sample(s).iter().copied()).collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn normalize_or_uniform(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        let n = w.len() as f64;
        w.iter_mut().for_each(|v| *v = 1.0 / n);
    }
    w
}

/// Training-free confidence weights: each expert's weight is the cosine
/// similarity between its flattened validation logits and the encoded
/// labels, clamped at zero and normalized. Binary labels are encoded as ±1,
/// class labels one-hot. Regression tasks have no label encoding and are
/// rejected.
pub fn zero_shot_confidence_weights(logits: &ExpertLogits, spec: &TaskSpec, targets: &[f64]) -> Result<Vec<f64>> {
    let encoded: Vec<f64> = match spec.task.kind() {
        TaskKind::Regression => {
            return Err(Error::not_applicable(format!(
                "zero-shot confidence weighting does not apply to regression task {}",
                spec.task
            )))
        }
        TaskKind::Binary => targets.iter().map(|&y| if y > 0.5 { 1.0 } else { -1.0 }).collect(),
        TaskKind::Multiclass => targets
            .iter()
            .flat_map(|&y| (0..logits.out_dim).map(move |j| if j == y as usize { 1.0 } else { 0.0 }))
            .collect(),
    };
    if targets.len() != logits.n || targets.is_empty() {
        return Err(Error::dim(format!("{} targets for {} logit rows", targets.len(), logits.n)));
    }
    let w = (0..logits.n_experts)
        .map(|i| cosine(&logits.expert(i), &encoded).max(0.0))
        .collect();
    Ok(normalize_or_uniform(w))
}

/// Greedy forward selection: start from the best single expert, then keep
/// mixing in whichever expert and grid coefficient gives the largest strict
/// improvement of the validation metric.
pub fn greedy_search_weights(
    logits: &ExpertLogits,
    spec: &TaskSpec,
    targets: &[f64],
    grid_step: f64,
) -> Result<Vec<f64>> {
    if targets.is_empty() || logits.n == 0 {
        return Err(Error::usage("greedy search needs a nonempty validation split"));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::usage(format!("grid step must lie in (0, 1], got {grid_step}")));
    }
    let metric = spec.metric();
    let ne = logits.n_experts;
    let score = |w: &[f64]| spec.score(&logits.combine_static(w), targets);
    let mut best_idx = 0;
    let mut best = f64::NAN;
    for i in 0..ne {
        let mut w = vec![0.0; ne];
        w[i] = 1.0;
        let s = score(&w)?;
        if i == 0 || metric.better(s, best) {
            best = s;
            best_idx = i;
        }
    }
    let mut weights = vec![0.0; ne];
    weights[best_idx] = 1.0;
    let steps = (1.0 / grid_step).round() as usize;
    let grid: Vec<f64> = (1..=steps).map(|k| (k as f64 * grid_step).min(1.0)).collect();
    for _round in 0..64 {
        let mut found: Option<(Vec<f64>, f64)> = None;
        for j in 0..ne {
            for &alpha in &grid {
                let cand: Vec<f64> = (0..ne)
                    .map(|i| (weights[i] + if i == j { alpha } else { 0.0 }) / (1.0 + alpha))
                    .collect();
                let s = score(&cand)?;
                let incumbent = found.as_ref().map_or(best, |f| f.1);
                if metric.better(s, incumbent) {
                    found = Some((cand, s));
                }
            }
        }
        match found {
            Some((w, s)) => {
                weights = w;
                best = s;
            }
            None => break,
        }
    }
    Ok(weights)
}

/// Optimizer settings for fitting a gate on frozen logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GateTraining {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// The tuning baseline: a gate with every parameter trainable, fitted on the
/// validation split by the task loss of the weighted combination of frozen
/// expert logits.
pub fn sample_aware_weights_train(
    config: &GateConfig,
    inputs: &[Vec<f64>],
    logits: &ExpertLogits,
    spec: &TaskSpec,
    targets: &[f64],
    training: &GateTraining,
) -> Result<GatingNetwork> {
    if inputs.is_empty() || inputs.len() != logits.n || targets.len() != logits.n {
        return Err(Error::usage(format!(
            "sample-aware gate needs matching nonempty inputs ({}), logits ({}) and targets ({})",
            inputs.len(),
            logits.n,
            targets.len()
        )));
    }
    if training.batch_size == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    let cfg = GateConfig {
        lora_only: false,
        ..config.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed);
    let mut gate = GatingNetwork::new(cfg, logits.n_experts, logits.out_dim, &mut rng)?;
    let in_dim = gate.input_dim();
    if let Some(bad) = inputs.iter().position(|r| r.len() != in_dim) {
        return Err(Error::dim(format!("gate input {bad} has length {}, expected {in_dim}", inputs[bad].len())));
    }
    let mut adam = AdamState::new(AdamConfig {
        lr: training.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..logits.n).collect();
    let (ne, l) = (logits.n_experts, logits.out_dim);
    for epoch in 0..training.epochs {
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(training.batch_size).enumerate() {
            let b = batch.len();
            let mut tape = Tape::new();
            let x = tape.constant(&[b, in_dim], batch.iter().flat_map(|&s| inputs[s].iter().copied()).collect())?;
            let lg = tape.constant(&[b, ne, l], logits.rows(batch))?;
            let t: Vec<f64> = batch.iter().map(|&s| targets[s]).collect();
            let w = gate.forward(&mut tape, x)?;
            let z = ensemble_combine(&mut tape, lg, w)?;
            let loss = spec.loss(&mut tape, z, &t).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!("sample-aware gate epoch {epoch} step {step}")),
                other => other,
            })?;
            let mut params = gate.trainable_mut();
            tape.backward_into(loss, &mut params)?;
            adam.step(&mut params)?;
            params.iter_mut().for_each(|p| p.zero_grad());
        }
    }
    Ok(gate)
}
