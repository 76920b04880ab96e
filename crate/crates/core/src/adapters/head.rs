use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::lora::{effective_rank, LoraLinear};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Shape and training mode of an output head (also reused by the gate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub rank: usize,
    /// 1 = a single layer, 2 = layer, ReLU, layer.
    pub depth: usize,
    pub train_bias: bool,
    /// When false `W0` is trained too (full fine-tuning ablation).
    pub lora_only: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            rank: 4,
            depth: 2,
            train_bias: true,
            lora_only: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.depth) {
            return Err(Error::usage(format!("head depth must be 1 or 2, got {}", self.depth)));
        }
        if self.hidden == 0 || self.rank == 0 {
            return Err(Error::usage("head hidden width and rank must be positive"));
        }
        Ok(())
    }

    /// `(d, k)` of each layer for a head mapping `input` features to `output`.
    pub fn layer_dims(&self, input: usize, output: usize) -> Vec<(usize, usize)> {
        if self.depth == 1 {
            vec![(output, input)]
        } else {
            vec![(self.hidden, input), (output, self.hidden)]
        }
    }
}

/// Feedforward output head built from LoRA layers with ReLU in between.
#[derive(Debug, Clone)]
pub struct LoraHead {
    pub layers: Vec<LoraLinear>,
}

impl LoraHead {
    pub fn new<R: Rng + ?Sized>(cfg: &HeadConfig, input: usize, output: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg
            .layer_dims(input, output)
            .into_iter()
            .map(|(d, k)| {
                LoraLinear::new(d, k, effective_rank(d, k, cfg.rank), cfg.train_bias, !cfg.lora_only, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("heads have at least one layer").out_dim()
    }

    /// `x: [batch, k]` to `[batch, L]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h)?;
            }
            h = layer.forward(tape, h)?;
        }
        Ok(h)
    }

    /// Logits for one feature vector.
    pub fn forward_vec(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut h = features.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = layer.forward_vec(&h)?;
        }
        Ok(h)
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
}

/// The trainable tensors of a head: `A`, `B` and (if configured) the bias.
pub fn trainable_params(head: &LoraHead) -> Vec<&Tensor> {
    head.trainable()
}
