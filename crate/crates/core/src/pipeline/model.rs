use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{Checkpoint, HeadConfig, LoraHead};
use crate::error::{Error, Result};
use crate::experts::{ExpertModel, FeatureScaler};
use crate::gating::{ensemble_combine, EnsembleOutput, GateConfig, GatingNetwork};
use crate::numerics::{checksum_all, Tape, Tensor, Var};
use crate::par::{chunks, try_map_range, Exec};
use crate::task::{Task, TaskSpec};

use super::data::PreparedDataset;

/// How per-expert logits are weighted.
#[derive(Debug, Clone)]
pub enum Mixer {
    /// Input-dependent weights from a gating network.
    Gate(GatingNetwork),
    /// One fixed weight per expert (single-expert models, post-hoc
    /// baselines).
    Fixed(Vec<f64>),
}

/// Construction-time choice of mixer.
#[derive(Debug, Clone, PartialEq)]
pub enum MixerInit {
    Gate(GateConfig),
    Fixed(Vec<f64>),
}

/// Tape nodes of one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    /// `[batch, N, L]`
    pub logits: Var,
    /// `[batch, N, L]`
    pub weights: Var,
    /// `[batch, L]`
    pub combined: Var,
}

/// Per-task ensemble: a LoRA head on each selected expert plus a mixer.
#[derive(Debug, Clone)]
pub struct EnEcgModel {
    pub spec: TaskSpec,
    /// Indices into the expert roster.
    pub experts: Vec<usize>,
    pub scalers: Vec<FeatureScaler>,
    pub head_config: HeadConfig,
    pub heads: Vec<LoraHead>,
    pub mixer: Mixer,
}

/// Mean-pool downsampling recorded on the tape; matches
/// [`crate::signal::downsample_tensor`] exactly.
pub(crate) fn tape_downsample(tape: &mut Tape, x: Var, target: usize) -> Result<Var> {
    let t = tape.shape(x)[1];
    if target == 0 {
        return Err(Error::usage("downsample: target length must be positive"));
    }
    if target > t {
        return Err(Error::dim(format!("downsample: target length {target} exceeds signal length {t}")));
    }
    if target == t {
        return Ok(x);
    }
    let window = t / target;
    let x = if window * target < t {
        tape.slice(x, 1, 0, window * target)?
    } else {
        x
    };
    tape.mean_pool(x, window)
}

impl EnEcgModel {
    pub fn new<R: Rng + ?Sized>(
        spec: TaskSpec,
        experts: Vec<usize>,
        scalers: Vec<FeatureScaler>,
        head_config: HeadConfig,
        mixer: MixerInit,
        rng: &mut R,
    ) -> Result<Self> {
        if experts.is_empty() || experts.len() != scalers.len() {
            return Err(Error::usage("model needs one scaler per selected expert"));
        }
        let l = spec.out_dim();
        let heads = scalers
            .iter()
            .map(|s| LoraHead::new(&head_config, s.dim(), l, rng))
            .collect::<Result<Vec<_>>>()?;
        let mixer = match mixer {
            MixerInit::Gate(cfg) => Mixer::Gate(GatingNetwork::new(cfg, experts.len(), l, rng)?),
            MixerInit::Fixed(w) => {
                if w.len() != experts.len() || w.iter().any(|&v| v.is_nan() || v < 0.0) {
                    return Err(Error::usage(format!(
                        "fixed weights {w:?} must be nonnegative, one per expert"
                    )));
                }
                Mixer::Fixed(w)
            }
        };
        Ok(Self {
            spec,
            experts,
            scalers,
            head_config,
            heads,
            mixer,
        })
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim()
    }

    pub fn gate(&self) -> Option<&GatingNetwork> {
        match &self.mixer {
            Mixer::Gate(g) => Some(g),
            Mixer::Fixed(_) => None,
        }
    }

    /// Heads applied to per-expert features `[b, fd_i]`, stacked to
    /// `[b, N, L]`.
    fn stacked_logits(&self, tape: &mut Tape, feats: &[Var], b: usize) -> Result<Var> {
        let l = self.out_dim();
        let mut parts = Vec::with_capacity(feats.len());
        for ((&f, scaler), head) in feats.iter().zip(&self.scalers).zip(&self.heads) {
            let z = scaler.apply(tape, f)?;
            let y = head.forward(tape, z)?;
            parts.push(tape.reshape(y, &[b, 1, l])?);
        }
        tape.concat(&parts, 1)
    }

    fn mix(&self, tape: &mut Tape, logits: Var, gate_x: Option<Var>, b: usize) -> Result<BatchOutput> {
        let (n, l) = (self.n_experts(), self.out_dim());
        let weights = match (&self.mixer, gate_x) {
            (Mixer::Gate(g), Some(x)) => g.forward(tape, x)?,
            (Mixer::Gate(_), None) => return Err(Error::usage("gated model needs a gate input")),
            (Mixer::Fixed(w), _) => {
                let data = (0..b)
                    .flat_map(|_| w.iter().flat_map(move |&wi| std::iter::repeat_n(wi, l)))
                    .collect();
                tape.constant(&[b, n, l], data)?
            }
        };
        let combined = ensemble_combine(tape, logits, weights)?;
        Ok(BatchOutput {
            logits,
            weights,
            combined,
        })
    }

    fn check_data(&self, data: &PreparedDataset) -> Result<()> {
        for (&e, s) in self.experts.iter().zip(&self.scalers) {
            if e >= data.n_experts() || data.feature_dims[e] != s.dim() {
                return Err(Error::usage(format!(
                    "model expert {e} does not match the prepared dataset"
                )));
            }
        }
        if let Some(g) = self.gate() {
            if g.input_dim() != data.gate_dim {
                return Err(Error::usage(format!(
                    "gate expects {} inputs, dataset provides {}",
                    g.input_dim(),
                    data.gate_dim
                )));
            }
        }
        Ok(())
    }

    /// Per-expert head logits `[b, N, L]` over cached features, without
    /// mixing.
    pub(crate) fn head_logits_cached(&self, tape: &mut Tape, data: &PreparedDataset, idx: &[usize]) -> Result<Var> {
        self.check_data(data)?;
        if idx.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let b = idx.len();
        let mut feats = Vec::with_capacity(self.n_experts());
        for &e in &self.experts {
            let d = data.feature_dims[e];
            let rows = idx.iter().flat_map(|&i| data.feature_row(e, i).iter().copied()).collect();
            feats.push(tape.constant(&[b, d], rows)?);
        }
        self.stacked_logits(tape, &feats, b)
    }

    /// Forward pass over cached expert features for the records in `idx`.
    pub fn forward_cached(&self, tape: &mut Tape, data: &PreparedDataset, idx: &[usize]) -> Result<BatchOutput> {
        let logits = self.head_logits_cached(tape, data, idx)?;
        let b = idx.len();
        let gate_x = match self.mixer {
            Mixer::Gate(_) => {
                let rows = idx.iter().flat_map(|&i| data.gate_row(i).iter().copied()).collect();
                Some(tape.constant(&[b, data.gate_dim], rows)?)
            }
            Mixer::Fixed(_) => None,
        };
        self.mix(tape, logits, gate_x, b)
    }

    /// End-to-end forward for one raw record `x: [C, T]` already on the
    /// tape: per-expert downsampling, frozen experts, heads, gate on the
    /// pooled lead subset, weighted sum. Everything is differentiable in `x`.
    pub fn forward_record(&self, tape: &mut Tape, roster: &[ExpertModel], x: Var) -> Result<BatchOutput> {
        if tape.shape(x).len() != 2 {
            return Err(Error::dim(format!("record input must be [C, T], got {:?}", tape.shape(x))));
        }
        let mut feats = Vec::with_capacity(self.n_experts());
        for &e in &self.experts {
            let m = roster
                .get(e)
                .ok_or_else(|| Error::usage(format!("expert index {e} not in the roster")))?;
            let xd = tape_downsample(tape, x, m.required_input_len())?;
            feats.push(m.forward(tape, xd)?);
        }
        let logits = self.stacked_logits(tape, &feats, 1)?;
        let gate_x = match &self.mixer {
            Mixer::Gate(g) => {
                let c = tape.shape(x)[0];
                let mut rows = Vec::with_capacity(g.config.leads.len());
                for &lead in &g.config.leads {
                    if lead >= c {
                        return Err(Error::dim(format!("gate lead {lead} out of range for {c} leads")));
                    }
                    rows.push(tape.slice(x, 0, lead, lead + 1)?);
                }
                let sub = tape.concat(&rows, 0)?;
                let pooled = tape_downsample(tape, sub, g.config.pooled_len)?;
                Some(tape.reshape(pooled, &[1, g.input_dim()])?)
            }
            Mixer::Fixed(_) => None,
        };
        self.mix(tape, logits, gate_x, 1)
    }

    /// Per-sample logits, weights and combination for the records in `idx`.
    pub fn outputs(&self, data: &PreparedDataset, idx: &[usize]) -> Result<Vec<EnsembleOutput>> {
        let mut tape = Tape::new();
        let out = self.forward_cached(&mut tape, data, idx)?;
        let (n, l) = (self.n_experts(), self.out_dim());
        let lv = tape.value(out.logits);
        let wv = tape.value(out.weights);
        let cv = tape.value(out.combined);
        (0..idx.len())
            .map(|s| {
                Ok(EnsembleOutput {
                    logits: Tensor::new(&[n, l], lv[s * n * l..(s + 1) * n * l].to_vec())?,
                    weights: Tensor::new(&[n, l], wv[s * n * l..(s + 1) * n * l].to_vec())?,
                    combined: Tensor::new(&[l], cv[s * l..(s + 1) * l].to_vec())?,
                })
            })
            .collect()
    }

    /// Combined `[n, L]` logits for `idx`, evaluated in chunks that may run
    /// in parallel. Output order follows `idx`.
    pub fn predict_logits(&self, data: &PreparedDataset, idx: &[usize], exec: Exec) -> Result<Vec<f64>> {
        let parts = chunks(idx.len(), EVAL_CHUNK);
        let out = try_map_range(exec, parts.len(), |c| {
            let mut tape = Tape::new();
            let o = self.forward_cached(&mut tape, data, &idx[parts[c].clone()])?;
            Ok::<_, Error>(tape.value(o.combined).to_vec())
        })?;
        Ok(out.concat())
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.heads.iter().flat_map(LoraHead::trainable).collect();
        if let Some(g) = self.gate() {
            v.extend(g.trainable());
        }
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.heads.iter_mut().flat_map(LoraHead::trainable_mut).collect();
        if let Mixer::Gate(g) = &mut self.mixer {
            v.extend(g.trainable_mut());
        }
        v
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Frozen parameters of heads and gate (expert parameters excluded).
    pub fn frozen_count(&self) -> usize {
        self.heads.iter().map(LoraHead::frozen_count).sum::<usize>()
            + self.gate().map_or(0, GatingNetwork::frozen_count)
    }

    /// Trainable count if heads and gate were fine-tuned at full rank.
    pub fn full_count(&self) -> usize {
        self.heads.iter().map(LoraHead::full_count).sum::<usize>()
            + self.gate().map_or(0, GatingNetwork::full_count)
    }

    /// Checksum over every frozen `W0` of heads and gate.
    pub fn frozen_checksum(&self) -> String {
        let mut w0: Vec<&Tensor> = Vec::new();
        for h in &self.heads {
            w0.extend(h.layers.iter().filter(|l| !l.w0.requires_grad()).map(|l| &l.w0));
        }
        if let Some(g) = self.gate() {
            w0.extend(g.layers.iter().filter(|l| !l.w0.requires_grad()).map(|l| &l.w0));
        }
        checksum_all(w0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let s = &self.spec;
        ck.set_meta("task", s.task);
        ck.set_meta("target_mean", s.mean);
        ck.set_meta("target_std", s.std);
        ck.set_meta("pos_weight", s.pos_weight);
        ck.set_meta("neg_weight", s.neg_weight);
        ck.set_meta("experts", join(&self.experts));
        let h = &self.head_config;
        ck.set_meta("head.hidden", h.hidden);
        ck.set_meta("head.rank", h.rank);
        ck.set_meta("head.depth", h.depth);
        ck.set_meta("head.train_bias", h.train_bias);
        ck.set_meta("head.lora_only", h.lora_only);
        for (i, (scaler, head)) in self.scalers.iter().zip(&self.heads).enumerate() {
            ck.insert(format!("scaler{i}.shift"), &scaler.shift);
            ck.insert(format!("scaler{i}.inv_scale"), &scaler.inv_scale);
            for (j, layer) in head.layers.iter().enumerate() {
                layer.write_checkpoint(&mut ck, &format!("head{i}.layer{j}"));
            }
        }
        match &self.mixer {
            Mixer::Fixed(w) => {
                ck.set_meta("mixer", "fixed");
                ck.set_meta("fixed_weights", join(w));
            }
            Mixer::Gate(g) => {
                ck.set_meta("mixer", "gate");
                write_gate_config(&mut ck, &g.config);
                g.write_checkpoint(&mut ck, "gate");
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let task: Task = ck.meta_value("task")?.parse()?;
        let spec = TaskSpec {
            task,
            mean: meta(ck, "target_mean")?,
            std: meta(ck, "target_std")?,
            pos_weight: meta(ck, "pos_weight")?,
            neg_weight: meta(ck, "neg_weight")?,
        };
        let experts: Vec<usize> = split_list(ck.meta_value("experts")?)?;
        let head_config = HeadConfig {
            hidden: meta(ck, "head.hidden")?,
            rank: meta(ck, "head.rank")?,
            depth: meta(ck, "head.depth")?,
            train_bias: meta(ck, "head.train_bias")?,
            lora_only: meta(ck, "head.lora_only")?,
        };
        let scalers = (0..experts.len())
            .map(|i| {
                Ok(FeatureScaler {
                    shift: ck.tensor(&format!("scaler{i}.shift"))?.clone(),
                    inv_scale: ck.tensor(&format!("scaler{i}.inv_scale"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mixer = match ck.meta_value("mixer")? {
            "fixed" => MixerInit::Fixed(split_list(ck.meta_value("fixed_weights")?)?),
            "gate" => MixerInit::Gate(read_gate_config(ck)?),
            other => return Err(Error::usage(format!("unknown mixer kind {other:?} in checkpoint"))),
        };
        // Shapes come from the config; every value is then overwritten.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(spec, experts, scalers, head_config, mixer, &mut rng)?;
        for (i, head) in model.heads.iter_mut().enumerate() {
            for (j, layer) in head.layers.iter_mut().enumerate() {
                layer.read_checkpoint(ck, &format!("head{i}.layer{j}"))?;
            }
        }
        if let Mixer::Gate(g) = &mut model.mixer {
            g.read_checkpoint(ck, "gate")?;
        }
        Ok(model)
    }
}

pub(crate) fn write_gate_config(ck: &mut Checkpoint, c: &GateConfig) {
    ck.set_meta("gate.leads", join(&c.leads));
    ck.set_meta("gate.pooled_len", c.pooled_len);
    ck.set_meta("gate.hidden", c.hidden);
    ck.set_meta("gate.rank", c.rank);
    ck.set_meta("gate.per_coordinate", c.per_coordinate);
    ck.set_meta("gate.lora_only", c.lora_only);
    ck.set_meta("gate.train_bias", c.train_bias);
}

pub(crate) fn read_gate_config(ck: &Checkpoint) -> Result<GateConfig> {
    Ok(GateConfig {
        leads: split_list(ck.meta_value("gate.leads")?)?,
        pooled_len: meta(ck, "gate.pooled_len")?,
        hidden: meta(ck, "gate.hidden")?,
        rank: meta(ck, "gate.rank")?,
        per_coordinate: meta(ck, "gate.per_coordinate")?,
        lora_only: meta(ck, "gate.lora_only")?,
        train_bias: meta(ck, "gate.train_bias")?,
    })
}

pub(crate) const EVAL_CHUNK: usize = 256;

pub(crate) fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn split_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::usage(format!("unreadable list entry {p:?} in checkpoint")))
        })
        .collect()
}

pub(crate) fn meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.meta_value(key)?
        .parse()
        .map_err(|_| Error::usage(format!("checkpoint meta {key} has an unreadable value")))
}
