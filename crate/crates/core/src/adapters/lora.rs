use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{checksum_all, Tape, Tensor, Var};

/// Linear layer `h = (W0 + B·A)x + bias` with `W0` frozen and the low-rank
/// factors `A: [r, k]`, `B: [d, r]` trainable.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub w0: Tensor,
    pub bias: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    rank: usize,
}

impl LoraLinear {
    /// `W0` and `A` are drawn from `U(±1/√k)`; `B` and the bias start at zero,
    /// so the layer initially computes exactly `W0·x`.
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        k: usize,
        rank: usize,
        train_bias: bool,
        train_w0: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::dim(format!("lora layer needs positive d and k, got d={d} k={k}")));
        }
        if rank == 0 || rank > d.min(k) {
            return Err(Error::usage(format!(
                "lora rank must lie in 1..={} for a {d}x{k} layer, got {rank}",
                d.min(k)
            )));
        }
        let bound = 1.0 / (k as f64).sqrt();
        let w0 = Tensor::uniform(&[d, k], bound, rng).with_requires_grad(train_w0);
        let a = Tensor::uniform(&[rank, k], bound, rng).with_requires_grad(true);
        let b = Tensor::zeros(&[d, rank]).with_requires_grad(true);
        let bias = Tensor::zeros(&[d]).with_requires_grad(train_bias);
        Ok(Self { w0, bias, a, b, rank })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn in_dim(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w0.shape()[0]
    }

    /// Records `x·W0ᵀ + (x·Aᵀ)·Bᵀ + bias` for `x: [batch, k]`. The dense
    /// update `B·A` is never formed.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.in_dim() {
            return Err(Error::dim(format!(
                "lora layer expects [batch, {}], got {s:?}",
                self.in_dim()
            )));
        }
        let w0 = tape.leaf(&self.w0);
        let a = tape.leaf(&self.a);
        let b = tape.leaf(&self.b);
        let bias = tape.leaf(&self.bias);
        let w0t = tape.transpose(w0)?;
        let base = tape.matmul(x, w0t)?;
        let at = tape.transpose(a)?;
        let low = tape.matmul(x, at)?;
        let bt = tape.transpose(b)?;
        let delta = tape.matmul(low, bt)?;
        let h = tape.add(base, delta)?;
        tape.add(h, bias)
    }

    /// Single-vector forward without a tape.
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (d, k, r) = (self.out_dim(), self.in_dim(), self.rank);
        if x.len() != k {
            return Err(Error::dim(format!("lora layer expects length {k}, got {}", x.len())));
        }
        let w0 = self.w0.data();
        let a = self.a.data();
        let b = self.b.data();
        let ax: Vec<f64> = (0..r).map(|i| (0..k).map(|j| a[i * k + j] * x[j]).sum()).collect();
        Ok((0..d)
            .map(|i| {
                let base: f64 = (0..k).map(|j| w0[i * k + j] * x[j]).sum();
                let low: f64 = (0..r).map(|j| b[i * r + j] * ax[j]).sum();
                base + low + self.bias.data()[i]
            })
            .collect())
    }

    /// Dense `B·A`, for inspection and merging.
    pub fn delta(&self) -> Tensor {
        let (d, k, r) = (self.out_dim(), self.in_dim(), self.rank);
        let data = crate::numerics::matmul_raw(self.b.data(), self.a.data(), d, r, k);
        Tensor::new(&[d, k], data).expect("finite factors")
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        [&self.w0, &self.a, &self.b, &self.bias]
            .into_iter()
            .filter(|t| t.requires_grad())
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        [&mut self.w0, &mut self.a, &mut self.b, &mut self.bias]
            .into_iter()
            .filter(|t| t.requires_grad())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Parameters of this layer that never change.
    pub fn frozen_count(&self) -> usize {
        [&self.w0, &self.a, &self.b, &self.bias]
            .into_iter()
            .filter(|t| !t.requires_grad())
            .map(|t| t.len())
            .sum()
    }

    /// Count a full-rank replacement (`W0` and bias trained) would have.
    pub fn full_count(&self) -> usize {
        self.out_dim() * self.in_dim() + self.out_dim()
    }

    pub fn w0_checksum(&self) -> String {
        checksum_all([&self.w0])
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w0", &mut self.w0),
            ("bias", &mut self.bias),
            ("a", &mut self.a),
            ("b", &mut self.b),
        ]
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("w0", &self.w0), ("bias", &self.bias), ("a", &self.a), ("b", &self.b)]
    }
}

/// Exact trainable count of one LoRA layer: `r(d + k)`, plus `d` for a
/// trainable bias.
pub fn lora_param_count(d: usize, k: usize, rank: usize, train_bias: bool) -> usize {
    rank * (d + k) + if train_bias { d } else { 0 }
}

/// Rank actually used for a `d × k` layer when `rank` is requested.
pub fn effective_rank(d: usize, k: usize, rank: usize) -> usize {
    rank.min(d).min(k).max(1)
}
