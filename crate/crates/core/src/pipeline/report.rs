use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::Strategy;
use crate::task::{Metric, Task};

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub strategy: Strategy,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    /// One test metric per repeat.
    pub values: Vec<f64>,
    pub params_trainable: usize,
    pub params_frozen: usize,
    pub params_total: usize,
    pub params_full_ffn: usize,
    /// Inference throughput, samples per second.
    pub throughput_sps: f64,
    pub train_throughput_sps: f64,
    pub wallclock_s: f64,
    pub activation_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: Vec<TaskReport>,
}

impl MetricsReport {
    pub fn get(&self, task: Task) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == task)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "task,strategy,metric,mean,std,params_trainable,params_frozen,params_total,params_full_ffn,throughput_sps,train_throughput_sps,wallclock_s,activation_bytes\n",
        );
        for t in &self.tasks {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                t.task,
                t.strategy,
                t.metric.name(),
                t.mean,
                t.std,
                t.params_trainable,
                t.params_frozen,
                t.params_total,
                t.params_full_ffn,
                t.throughput_sps,
                t.train_throughput_sps,
                t.wallclock_s,
                t.activation_bytes
            )
            .unwrap();
        }
        s
    }

    /// Equality of everything except timings.
    pub fn same_results(&self, other: &Self) -> bool {
        self.tasks.len() == other.tasks.len()
            && self.tasks.iter().zip(&other.tasks).all(|(a, b)| {
                a.task == b.task
                    && a.strategy == b.strategy
                    && a.values == b.values
                    && a.mean.to_bits() == b.mean.to_bits()
                    && a.std.to_bits() == b.std.to_bits()
                    && a.params_trainable == b.params_trainable
                    && a.params_total == b.params_total
            })
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn new(values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task: Task,
    pub metric: Metric,
    /// Aligned with [`ComparisonReport::columns`]; `None` where the strategy
    /// does not apply.
    pub cells: Vec<Option<Stat>>,
    /// Best single fine-tuned expert by mean test metric.
    pub best_single: Option<(String, Stat)>,
}

/// Ensemble strategies side by side, one row per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub columns: Vec<Strategy>,
    pub rows: Vec<ComparisonRow>,
}

pub const NOT_APPLICABLE: &str = "-";

impl ComparisonReport {
    pub fn cell(&self, task: Task, strategy: Strategy) -> Option<&Stat> {
        let col = self.columns.iter().position(|&c| c == strategy)?;
        self.rows.iter().find(|r| r.task == task)?.cells[col].as_ref()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table; inapplicable cells show `-`.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12}{:<10}", "task", "metric");
        for c in &self.columns {
            write!(s, "{:>22}", c.tag()).unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{:<12}{:<10}", r.task.name(), r.metric.name()).unwrap();
            for c in &r.cells {
                let text = match c {
                    Some(st) => format!("{:.4}±{:.4}", st.mean, st.std),
                    None => NOT_APPLICABLE.to_string(),
                };
                write!(s, "{text:>22}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric");
        for c in &self.columns {
            write!(s, ",{0}_mean,{0}_std", c.tag()).unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{}", r.task, r.metric.name()).unwrap();
            for c in &r.cells {
                match c {
                    Some(st) => write!(s, ",{},{}", st.mean, st.std).unwrap(),
                    None => write!(s, ",{NOT_APPLICABLE},{NOT_APPLICABLE}").unwrap(),
                }
            }
            s.push('\n');
        }
        s
    }
}
