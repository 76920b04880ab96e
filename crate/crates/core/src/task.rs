//! The five downstream tasks: target extraction, losses and metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tape, Var};
use crate::signal::{LabelSet, ARRHYTHMIA_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Rr,
    Age,
    Sex,
    Potassium,
    Arrhythmia,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mae,
    F1,
    Accuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::F1 => "f1",
            Metric::Accuracy => "accuracy",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Mae)
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Rr, Task::Age, Task::Sex, Task::Potassium, Task::Arrhythmia];

    pub fn name(self) -> &'static str {
        match self {
            Task::Rr => "rr",
            Task::Age => "age",
            Task::Sex => "sex",
            Task::Potassium => "potassium",
            Task::Arrhythmia => "arrhythmia",
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            Task::Rr | Task::Age => TaskKind::Regression,
            Task::Sex | Task::Potassium => TaskKind::Binary,
            Task::Arrhythmia => TaskKind::Multiclass,
        }
    }

    /// Logits per sample.
    pub fn out_dim(self) -> usize {
        match self.kind() {
            TaskKind::Multiclass => ARRHYTHMIA_CLASSES,
            _ => 1,
        }
    }

    pub fn metric(self) -> Metric {
        match self.kind() {
            TaskKind::Regression => Metric::Mae,
            TaskKind::Binary => Metric::F1,
            TaskKind::Multiclass => Metric::Accuracy,
        }
    }

    /// Raw target value (class index for arrhythmia).
    pub fn target(self, l: &LabelSet) -> f64 {
        match self {
            Task::Rr => l.rr_ms,
            Task::Age => l.age_years,
            Task::Sex => l.sex as f64,
            Task::Potassium => l.potassium_abnormal as f64,
            Task::Arrhythmia => l.arrhythmia_class as f64,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::usage(format!("unknown task {s:?} (expected rr, age, sex, potassium or arrhythmia)")))
    }
}

/// A task together with the statistics fitted on its training targets:
/// standardization for regression and class weights for binary tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub mean: f64,
    pub std: f64,
    pub pos_weight: f64,
    pub neg_weight: f64,
}

impl TaskSpec {
    /// Unfitted spec: identity standardization, unit class weights.
    pub fn plain(task: Task) -> Self {
        Self {
            task,
            mean: 0.0,
            std: 1.0,
            pos_weight: 1.0,
            neg_weight: 1.0,
        }
    }

    pub fn fit(task: Task, train_targets: &[f64], class_weighting: bool) -> Result<Self> {
        if train_targets.is_empty() {
            return Err(Error::usage(format!("{task}: no training targets")));
        }
        let mut spec = Self::plain(task);
        let n = train_targets.len() as f64;
        match task.kind() {
            TaskKind::Regression => {
                let mean = train_targets.iter().sum::<f64>() / n;
                let var = train_targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
                spec.mean = mean;
                spec.std = var.sqrt().max(1e-12);
            }
            TaskKind::Binary if class_weighting => {
                let p = train_targets.iter().filter(|&&y| y > 0.5).count() as f64 / n;
                if p > 0.0 && p < 1.0 {
                    spec.pos_weight = 0.5 / p;
                    spec.neg_weight = 0.5 / (1.0 - p);
                }
            }
            _ => {}
        }
        Ok(spec)
    }

    pub fn out_dim(&self) -> usize {
        self.task.out_dim()
    }

    pub fn metric(&self) -> Metric {
        self.task.metric()
    }

    /// Training loss of logits `z: [batch, L]` against raw targets.
    pub fn loss(&self, tape: &mut Tape, z: Var, targets: &[f64]) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[1] != self.out_dim() {
            return Err(Error::dim(format!(
                "{} loss: logits {shape:?} for {} targets with L={}",
                self.task,
                targets.len(),
                self.out_dim()
            )));
        }
        match self.task.kind() {
            TaskKind::Regression => {
                let t: Vec<f64> = targets.iter().map(|y| (y - self.mean) / self.std).collect();
                let t = tape.constant(&shape, t)?;
                let d = tape.sub(z, t)?;
                let sq = tape.mul(d, d)?;
                tape.mean(sq)
            }
            TaskKind::Binary => {
                let w: Vec<f64> = targets
                    .iter()
                    .map(|&y| if y > 0.5 { self.pos_weight } else { self.neg_weight })
                    .collect();
                tape.bce_with_logits(z, targets, &w)
            }
            TaskKind::Multiclass => {
                let classes: Vec<usize> = targets.iter().map(|&y| y as usize).collect();
                tape.cross_entropy(z, &classes)
            }
        }
    }

    /// Loss without a tape, for validation.
    pub fn loss_value(&self, logits: &[f64], targets: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let z = tape.constant(&[targets.len(), self.out_dim()], logits.to_vec())?;
        let l = self.loss(&mut tape, z, targets)?;
        Ok(tape.value(l)[0])
    }

    /// Task-space predictions from `[n, L]` logits: de-standardized values,
    /// hard 0/1 labels (sigmoid at 0.5), or argmax classes.
    pub fn predict(&self, logits: &[f64]) -> Vec<f64> {
        match self.task.kind() {
            TaskKind::Regression => logits.iter().map(|z| z * self.std + self.mean).collect(),
            TaskKind::Binary => logits
                .iter()
                .map(|&z| if sigmoid(z) > 0.5 { 1.0 } else { 0.0 })
                .collect(),
            TaskKind::Multiclass => logits
                .chunks(self.out_dim())
                .map(|row| {
                    let mut best = 0;
                    for (j, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = j;
                        }
                    }
                    best as f64
                })
                .collect(),
        }
    }

    pub fn score(&self, logits: &[f64], targets: &[f64]) -> Result<f64> {
        if logits.len() != targets.len() * self.out_dim() {
            return Err(Error::dim(format!(
                "{}: {} logits for {} targets",
                self.task,
                logits.len(),
                targets.len()
            )));
        }
        metric_value(self.metric(), &self.predict(logits), targets)
    }
}

pub fn metric_value(metric: Metric, predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::usage("cannot score an empty split"));
    }
    Ok(match metric {
        Metric::Mae => mae(predictions, targets),
        Metric::F1 => f1(predictions, targets),
        Metric::Accuracy => accuracy(predictions, targets),
    })
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

/// F1 of the positive class; 0 when there are no true positives.
pub fn f1(pred: &[f64], target: &[f64]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        match (p > 0.5, t > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

pub fn accuracy(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}
