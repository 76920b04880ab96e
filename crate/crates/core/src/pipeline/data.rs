use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::check_split;
use crate::error::{Error, Result};
use crate::experts::ExpertModel;
use crate::gating::GateConfig;
use crate::par::{try_map_range, Exec};
use crate::signal::{downsample, load_records, manifest_files, EcgRecord, GeneratorConfig, LabelSet};
use crate::task::Task;

/// Record indices of the three partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, then contiguous train/val/test blocks whose
/// sizes are the rounded ratios (the test block takes the remainder).
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(Error::usage("cannot split an empty dataset"));
    }
    check_split(ratios)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

/// What the trainable parts of the model see of one record: frozen expert
/// features and the pooled gate input.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordView {
    pub features: Vec<Vec<f64>>,
    pub gate_input: Vec<f64>,
}

/// Expert features for one record: each expert receives the record
/// downsampled to its own input length.
pub fn record_view(record: &EcgRecord, experts: &[ExpertModel], gate: &GateConfig) -> Result<RecordView> {
    let features = experts
        .iter()
        .map(|m| m.features(&downsample(record, m.required_input_len())?))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecordView {
        features,
        gate_input: gate.gate_input(record)?,
    })
}

/// Cached frozen-expert outputs for a whole dataset. Since experts never
/// change, training the heads and gate on these is identical to running the
/// experts inside every step.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub record_ids: Vec<String>,
    pub labels: Vec<LabelSet>,
    pub feature_dims: Vec<usize>,
    /// Per expert, `[n, feature_dim]` row-major.
    pub features: Vec<Vec<f64>>,
    pub gate_dim: usize,
    /// `[n, gate_dim]` row-major.
    pub gate_inputs: Vec<f64>,
}

impl PreparedDataset {
    pub fn from_views(ids: Vec<String>, labels: Vec<LabelSet>, views: Vec<RecordView>) -> Result<Self> {
        if views.is_empty() || views.len() != labels.len() || ids.len() != labels.len() {
            return Err(Error::usage("prepared dataset needs matching nonempty ids, labels and views"));
        }
        let n_experts = views[0].features.len();
        let feature_dims: Vec<usize> = views[0].features.iter().map(Vec::len).collect();
        let gate_dim = views[0].gate_input.len();
        let mut features: Vec<Vec<f64>> = feature_dims.iter().map(|d| Vec::with_capacity(d * views.len())).collect();
        let mut gate_inputs = Vec::with_capacity(gate_dim * views.len());
        for v in views {
            if v.features.len() != n_experts || v.gate_input.len() != gate_dim {
                return Err(Error::dim("record views differ in shape"));
            }
            for (e, f) in v.features.into_iter().enumerate() {
                if f.len() != feature_dims[e] {
                    return Err(Error::dim("record views differ in shape"));
                }
                features[e].extend(f);
            }
            gate_inputs.extend(v.gate_input);
        }
        Ok(Self {
            record_ids: ids,
            labels,
            feature_dims,
            features,
            gate_dim,
            gate_inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_experts(&self) -> usize {
        self.features.len()
    }

    pub fn feature_row(&self, expert: usize, i: usize) -> &[f64] {
        let d = self.feature_dims[expert];
        &self.features[expert][i * d..(i + 1) * d]
    }

    pub fn gate_row(&self, i: usize) -> &[f64] {
        &self.gate_inputs[i * self.gate_dim..(i + 1) * self.gate_dim]
    }

    pub fn targets(&self, task: Task, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| task.target(&self.labels[i])).collect()
    }
}

/// Prepares records already in memory.
pub fn prepare_records(
    records: &[(EcgRecord, LabelSet)],
    experts: &[ExpertModel],
    gate: &GateConfig,
    exec: Exec,
) -> Result<PreparedDataset> {
    let views = try_map_range(exec, records.len(), |i| record_view(&records[i].0, experts, gate))?;
    PreparedDataset::from_views(
        records.iter().map(|r| r.0.record_id.clone()).collect(),
        records.iter().map(|r| r.1).collect(),
        views,
    )
}

/// Prepares a saved dataset one record file at a time.
pub fn prepare_manifest(
    manifest: impl AsRef<Path>,
    experts: &[ExpertModel],
    gate: &GateConfig,
    exec: Exec,
) -> Result<PreparedDataset> {
    let (mut ids, mut labels, mut views) = (Vec::new(), Vec::new(), Vec::new());
    for file in manifest_files(manifest)? {
        let records = load_records(file)?;
        views.extend(try_map_range(exec, records.len(), |i| record_view(&records[i].0, experts, gate))?);
        for (rec, l) in records {
            ids.push(rec.record_id);
            labels.push(l);
        }
    }
    PreparedDataset::from_views(ids, labels, views)
}

/// Generates and prepares a synthetic dataset one record at a time, so the
/// raw samples of the whole dataset are never resident together.
pub fn prepare_generated(
    data: &GeneratorConfig,
    experts: &[ExpertModel],
    gate: &GateConfig,
    exec: Exec,
) -> Result<PreparedDataset> {
    let rows = data.generate_map(exec, |_, rec, labels| {
        Ok((rec.record_id.clone(), labels, record_view(&rec, experts, gate)?))
    })?;
    let mut ids = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut views = Vec::with_capacity(rows.len());
    for (id, l, v) in rows {
        ids.push(id);
        labels.push(l);
        views.push(v);
    }
    PreparedDataset::from_views(ids, labels, views)
}
