use serde::{Deserialize, Serialize};

use crate::adapters::HeadConfig;
use crate::error::{Error, Result};
use crate::experts::ExpertSpec;
use crate::gating::{GateConfig, Strategy};
use crate::par::Exec;
use crate::signal::GeneratorConfig;
use crate::task::Task;

/// Everything needed to rerun an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: GeneratorConfig,
    pub experts: Vec<ExpertSpec>,
    pub head: HeadConfig,
    pub gate: GateConfig,
    pub tasks: Vec<Task>,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ensemble: Strategy,
    pub class_weighting: bool,
    /// Independent repeats with derived seeds; metrics report mean ± std.
    pub repeats: usize,
    /// Train every task at once with a single shared gate.
    pub joint: bool,
    /// Start the gated ensemble from independently fine-tuned single-expert
    /// heads instead of fresh ones.
    pub warm_start: bool,
    /// Grid step of the greedy weighting baseline.
    pub greedy_step: f64,
    pub exec: Exec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GeneratorConfig::default(),
            experts: ExpertSpec::default_roster(),
            head: HeadConfig::default(),
            gate: GateConfig::default(),
            tasks: Task::ALL.to_vec(),
            split: [0.7, 0.2, 0.1],
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            ensemble: Strategy::Moe,
            class_weighting: true,
            repeats: 3,
            joint: false,
            warm_start: true,
            greedy_step: 0.1,
            exec: Exec::Parallel,
        }
    }
}

impl ExperimentConfig {
    /// A reduced setup for smoke tests: 2-second records, narrow experts,
    /// heads and gate, five epochs and a single repeat.
    pub fn small(n_records: usize) -> Self {
        let mut cfg = Self::default();
        cfg.data.n_records = n_records;
        cfg.data.duration_s = 2.0;
        for (spec, len) in cfg.experts.iter_mut().zip([256, 400, 500]) {
            spec.input_len = len;
            spec.feature_dim = 16;
        }
        cfg.head.hidden = 16;
        cfg.gate.pooled_len = 50;
        cfg.gate.hidden = 16;
        cfg.epochs = 5;
        cfg.repeats = 1;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        check_split(self.split)?;
        self.data.validate()?;
        self.head.validate()?;
        self.gate.validate()?;
        if self.experts.is_empty() {
            return Err(Error::usage("at least one expert is required"));
        }
        for (i, e) in self.experts.iter().enumerate() {
            if self.experts[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::usage(format!("duplicate expert name {:?}", e.name)));
            }
            if e.n_leads != self.data.n_leads() {
                return Err(Error::usage(format!(
                    "expert {} expects {} leads but records have {}",
                    e.name,
                    e.n_leads,
                    self.data.n_leads()
                )));
            }
            if e.input_len > self.data.n_samples() {
                return Err(Error::usage(format!(
                    "expert {} input length {} exceeds record length {}",
                    e.name,
                    e.input_len,
                    self.data.n_samples()
                )));
            }
        }
        if let Some(&l) = self.gate.leads.iter().find(|&&l| l >= self.data.n_leads()) {
            return Err(Error::usage(format!("gate lead {l} out of range")));
        }
        if self.gate.pooled_len > self.data.n_samples() {
            return Err(Error::usage("gate pooled length exceeds record length"));
        }
        if self.tasks.is_empty() {
            return Err(Error::usage("at least one task is required"));
        }
        if self.batch_size == 0 || self.repeats == 0 {
            return Err(Error::usage("batch size and repeats must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::usage("learning rate must be positive"));
        }
        if !(self.greedy_step > 0.0 && self.greedy_step <= 1.0) {
            return Err(Error::usage("greedy step must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Seed of repeat `r`.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, &format!("repeat{r}"))
    }
}

pub fn check_split(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::usage(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::usage(format!("split ratios must sum to 1, got {total}")));
    }
    Ok(())
}

/// Deterministic child seed: splitmix64 folded over the bytes of `salt`.
pub fn derive_seed(base: u64, salt: &str) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    salt.bytes().fold(mix(base), |acc, b| mix(acc ^ b as u64))
}
