use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::PreparedDataset;
use super::model::EnEcgModel;
use crate::error::{Error, Result};
use crate::experts::ExpertModel;
use crate::numerics::Tape;
use crate::par::{try_map_range, Exec};
use crate::signal::EcgRecord;
use crate::task::Metric;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: Metric,
    pub value: f64,
    pub loss: f64,
    pub n: usize,
}

/// Test metric and loss of `model` on the records in `idx`.
pub fn evaluate(model: &EnEcgModel, data: &PreparedDataset, idx: &[usize], exec: Exec) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(Error::usage("cannot evaluate an empty split"));
    }
    let logits = model.predict_logits(data, idx, exec)?;
    let targets = data.targets(model.task(), idx);
    Ok(Evaluation {
        metric: model.spec.metric(),
        value: model.spec.score(&logits, &targets)?,
        loss: model.spec.loss_value(&logits, &targets)?,
        n: idx.len(),
    })
}

/// Parameter accounting and inference speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub params_trainable: usize,
    /// Frozen head/gate `W0` plus all expert parameters.
    pub params_frozen: usize,
    pub params_total: usize,
    pub params_expert: usize,
    /// Trainable count of the same heads and gate fine-tuned at full rank.
    pub params_full_ffn: usize,
    /// `params_trainable / params_full_ffn`.
    pub lora_fraction: f64,
    /// Median over the timed passes.
    pub throughput_sps: f64,
    pub passes: usize,
    /// Bytes of every value recorded on the tape for one sample.
    pub activation_bytes: usize,
}

impl Efficiency {
    fn counts(model: &EnEcgModel, roster: &[ExpertModel]) -> Self {
        let params_expert: usize = model
            .experts
            .iter()
            .filter_map(|&e| roster.get(e))
            .map(ExpertModel::param_count)
            .sum();
        let params_trainable = model.trainable_count();
        let params_frozen = model.frozen_count() + params_expert;
        let params_full_ffn = model.full_count();
        Self {
            params_trainable,
            params_frozen,
            params_total: params_trainable + params_frozen,
            params_expert,
            params_full_ffn,
            lora_fraction: params_trainable as f64 / params_full_ffn as f64,
            throughput_sps: 0.0,
            passes: 0,
            activation_bytes: 0,
        }
    }
}

pub(crate) fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `passes` (at least 3) end-to-end passes over raw records: per-expert
/// downsampling, frozen experts, heads, gate and weighted sum.
pub fn bench(
    model: &EnEcgModel,
    roster: &[ExpertModel],
    records: &[EcgRecord],
    exec: Exec,
    passes: usize,
) -> Result<Efficiency> {
    if records.is_empty() {
        return Err(Error::usage("bench needs at least one record"));
    }
    let mut eff = Efficiency::counts(model, roster);
    let run_one = |r: &EcgRecord| -> Result<(Vec<f64>, usize)> {
        let mut tape = Tape::new();
        let x = tape.leaf(&r.leads);
        let out = model.forward_record(&mut tape, roster, x)?;
        Ok((tape.value(out.combined).to_vec(), tape.activation_bytes()))
    };
    eff.activation_bytes = run_one(&records[0])?.1;
    let passes = passes.max(3);
    let mut rates = Vec::with_capacity(passes);
    for _ in 0..passes {
        let t0 = Instant::now();
        let outs = try_map_range(exec, records.len(), |i| run_one(&records[i]))?;
        let dt = t0.elapsed().as_secs_f64().max(1e-9);
        debug_assert_eq!(outs.len(), records.len());
        rates.push(records.len() as f64 / dt);
    }
    eff.throughput_sps = median(rates);
    eff.passes = passes;
    Ok(eff)
}

/// Like [`bench`] but over cached expert features, timing heads, gate and
/// weighted sum only.
pub fn bench_cached(
    model: &EnEcgModel,
    roster: &[ExpertModel],
    data: &PreparedDataset,
    idx: &[usize],
    exec: Exec,
    passes: usize,
) -> Result<Efficiency> {
    if idx.is_empty() {
        return Err(Error::usage("bench needs at least one record"));
    }
    let mut eff = Efficiency::counts(model, roster);
    let mut tape = Tape::new();
    model.forward_cached(&mut tape, data, &idx[..1])?;
    eff.activation_bytes = tape.activation_bytes();
    let passes = passes.max(3);
    let mut rates = Vec::with_capacity(passes);
    for _ in 0..passes {
        let t0 = Instant::now();
        model.predict_logits(data, idx, exec)?;
        rates.push(idx.len() as f64 / t0.elapsed().as_secs_f64().max(1e-9));
    }
    eff.throughput_sps = median(rates);
    eff.passes = passes;
    Ok(eff)
}
