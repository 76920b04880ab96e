//! Mixture-of-experts gate, the weighted-sum ensemble and the baseline
//! weighting strategies it is compared against.

mod baselines;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{effective_rank, Checkpoint, LoraLinear};
use crate::error::{Error, Result};
use crate::numerics::{checksum_all, Tape, Tensor, Var};
use crate::signal::{downsample_tensor, leads_sample, EcgRecord, LEAD_II};

pub use baselines::{
    greedy_search_weights, sample_aware_weights_train, zero_shot_confidence_weights, ExpertLogits,
    GateTraining,
};

/// How expert logits are weighted into the ensemble output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Moe,
    ZeroShot,
    Greedy,
    SampleAware,
    Uniform,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Moe,
        Strategy::ZeroShot,
        Strategy::Greedy,
        Strategy::SampleAware,
        Strategy::Uniform,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Moe => "moe",
            Strategy::ZeroShot => "zero_shot",
            Strategy::Greedy => "greedy",
            Strategy::SampleAware => "sample_aware",
            Strategy::Uniform => "uniform",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|t| t.tag() == s.trim())
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown ensemble strategy {s:?} (expected moe, zero_shot, greedy, sample_aware or uniform)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Lead rows fed to the gate, in order.
    pub leads: Vec<usize>,
    /// Each selected lead is mean-pooled to this many samples.
    pub pooled_len: usize,
    pub hidden: usize,
    pub rank: usize,
    /// One weight per expert and output coordinate (`K = L`); when false a
    /// single weight per expert is shared by all coordinates (`K = 1`).
    pub per_coordinate: bool,
    pub lora_only: bool,
    pub train_bias: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            leads: vec![LEAD_II],
            pooled_len: 250,
            hidden: 64,
            rank: 4,
            per_coordinate: true,
            lora_only: true,
            train_bias: true,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.leads.is_empty() {
            return Err(Error::usage("gate needs at least one lead"));
        }
        if self.pooled_len == 0 || self.hidden == 0 || self.rank == 0 {
            return Err(Error::usage("gate pooled_len, hidden and rank must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.leads.len() * self.pooled_len
    }

    /// Gate input for one record: the configured leads, each mean-pooled to
    /// `pooled_len`, flattened lead-major.
    pub fn gate_input(&self, record: &EcgRecord) -> Result<Vec<f64>> {
        let sub = leads_sample(record, &self.leads)?;
        Ok(downsample_tensor(&sub, self.pooled_len)?.into_data())
    }
}

/// Two LoRA layers with a ReLU between them, followed by a softmax over the
/// expert axis.
#[derive(Debug, Clone)]
pub struct GatingNetwork {
    pub config: GateConfig,
    pub layers: Vec<LoraLinear>,
    n_experts: usize,
    out_dim: usize,
}

impl GatingNetwork {
    pub fn new<R: Rng + ?Sized>(config: GateConfig, n_experts: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if n_experts == 0 || out_dim == 0 {
            return Err(Error::usage("gate needs at least one expert and one output"));
        }
        let k_cols = if config.per_coordinate { out_dim } else { 1 };
        let dims = [(config.hidden, config.input_dim()), (n_experts * k_cols, config.hidden)];
        let layers = dims
            .into_iter()
            .map(|(d, k)| {
                LoraLinear::new(
                    d,
                    k,
                    effective_rank(d, k, config.rank),
                    config.train_bias,
                    !config.lora_only,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            layers,
            n_experts,
            out_dim,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    /// `x: [batch, input_dim]` to weights `[batch, N, L]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(Error::dim(format!(
                "gate expects input [batch, {}], got {s:?}",
                self.input_dim()
            )));
        }
        let b = s[0];
        let h = self.layers[0].forward(tape, x)?;
        let h = tape.relu(h)?;
        let scores = self.layers[1].forward(tape, h)?;
        let k_cols = if self.config.per_coordinate { self.out_dim } else { 1 };
        let scores = tape.reshape(scores, &[b, self.n_experts, k_cols])?;
        let w = tape.softmax(scores, 1)?;
        if k_cols == self.out_dim {
            Ok(w)
        } else {
            tape.concat(&vec![w; self.out_dim], 2)
        }
    }

    /// Weights `[N, L]` for one gate input.
    pub fn weights(&self, input: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, input.len()], input.to_vec())?;
        let w = self.forward(&mut tape, x)?;
        Tensor::new(&[self.n_experts, self.out_dim], tape.value(w).to_vec())
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(LoraLinear::trainable).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(LoraLinear::trainable_mut).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().map(LoraLinear::trainable_count).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.layers.iter().map(LoraLinear::frozen_count).sum()
    }

    pub fn full_count(&self) -> usize {
        self.layers.iter().map(LoraLinear::full_count).sum()
    }

    pub fn w0_checksum(&self) -> String {
        checksum_all(self.layers.iter().map(|l| &l.w0))
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.write_checkpoint(ck, &format!("{prefix}.layer{i}"));
        }
    }

    pub fn read_checkpoint(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.read_checkpoint(ck, &format!("{prefix}.layer{i}"))?;
        }
        Ok(())
    }
}

/// Weighted sum over the expert axis: `logits, weights: [batch, N, L]` to
/// `[batch, L]`.
pub fn ensemble_combine(tape: &mut Tape, logits: Var, weights: Var) -> Result<Var> {
    let (ls, ws) = (tape.shape(logits).to_vec(), tape.shape(weights).to_vec());
    if ls != ws || ls.len() != 3 {
        return Err(Error::dim(format!(
            "ensemble_combine: logits {ls:?} and weights {ws:?} must both be [batch, N, L]"
        )));
    }
    let prod = tape.mul(weights, logits)?;
    tape.sum_axis(prod, 1)
}

/// Per-sample ensemble result.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    /// `[N, L]`
    pub logits: Tensor,
    /// `[N, L]`
    pub weights: Tensor,
    /// `[L]`
    pub combined: Tensor,
}

impl EnsembleOutput {
    pub fn new(logits: Tensor, weights: Tensor) -> Result<Self> {
        let combined = combine(&logits, &weights)?;
        Ok(Self {
            logits,
            weights,
            combined,
        })
    }
}

/// `Σᵢ weights[i, ℓ] · logits[i, ℓ]` for one sample.
pub fn combine(logits: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if logits.shape() != weights.shape() || logits.shape().len() != 2 {
        return Err(Error::dim(format!(
            "combine: logits {:?} and weights {:?} must both be [N, L]",
            logits.shape(),
            weights.shape()
        )));
    }
    if weights.data().iter().any(|&w| w < 0.0) {
        return Err(Error::usage("combine: weights must be nonnegative"));
    }
    let mut tape = Tape::new();
    let s = logits.shape();
    let l = tape.constant(&[1, s[0], s[1]], logits.data().to_vec())?;
    let w = tape.constant(&[1, s[0], s[1]], weights.data().to_vec())?;
    let c = ensemble_combine(&mut tape, l, w)?;
    Tensor::new(&[s[1]], tape.value(c).to_vec())
}

#[cfg(test)]
mod tests;
