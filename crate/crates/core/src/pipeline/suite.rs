use std::time::Instant;

use super::config::{derive_seed, ExperimentConfig};
use super::data::{split, PreparedDataset, Split};
use super::evaluate::{bench_cached, evaluate, Evaluation};
use super::model::{EnEcgModel, Mixer};
use super::report::{ComparisonReport, ComparisonRow, MetricsReport, Stat, TaskReport};
use super::train::{assemble, train_moe, train_singles, TrainLog};
use crate::error::{Error, Result};
use crate::experts::ExpertModel;
use crate::gating::{
    greedy_search_weights, sample_aware_weights_train, zero_shot_confidence_weights, ExpertLogits, GateTraining,
    Strategy,
};
use crate::task::Task;

/// A single expert with its own fine-tuned head.
#[derive(Debug, Clone)]
pub struct SingleRun {
    pub expert: usize,
    pub model: EnEcgModel,
    pub log: TrainLog,
    pub test: Evaluation,
}

#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub strategy: Strategy,
    /// `Err` holds the reason a strategy does not apply (zero-shot on
    /// regression).
    pub outcome: std::result::Result<(EnEcgModel, Evaluation), String>,
    pub log: Option<TrainLog>,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct RepeatRun {
    pub repeat: usize,
    pub seed: u64,
    pub split: Split,
    pub singles: Vec<SingleRun>,
    pub strategies: Vec<StrategyRun>,
}

#[derive(Debug, Clone)]
pub struct TaskRun {
    pub task: Task,
    pub repeats: Vec<RepeatRun>,
}

impl TaskRun {
    pub fn strategy_values(&self, s: Strategy) -> Option<Vec<f64>> {
        self.repeats
            .iter()
            .map(|r| {
                r.strategies
                    .iter()
                    .find(|x| x.strategy == s)
                    .and_then(|x| x.outcome.as_ref().ok())
                    .map(|(_, e)| e.value)
            })
            .collect()
    }

    pub fn single_values(&self, expert: usize) -> Vec<f64> {
        self.repeats
            .iter()
            .filter_map(|r| r.singles.iter().find(|s| s.expert == expert))
            .map(|s| s.test.value)
            .collect()
    }

    /// Expert index with the best mean single-expert test metric.
    pub fn best_single(&self) -> Option<(usize, Stat)> {
        let metric = self.task.metric();
        let n = self.repeats.first()?.singles.len();
        let mut best: Option<(usize, Stat)> = None;
        for e in 0..n {
            let st = Stat::new(self.single_values(e));
            if best.as_ref().is_none_or(|(_, b)| metric.better(st.mean, b.mean)) {
                best = Some((e, st));
            }
        }
        best
    }
}

/// Puts independently fine-tuned single-expert heads side by side under a
/// post-hoc weighting strategy.
pub fn strategy_model(
    strategy: Strategy,
    singles: &[EnEcgModel],
    data: &PreparedDataset,
    split: &Split,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<EnEcgModel> {
    let first = singles.first().ok_or_else(|| Error::usage("no single-expert models"))?;
    let spec = first.spec;
    let n = singles.len();
    let task = spec.task;
    let val_targets = data.targets(task, &split.val);
    let val_logits = || -> Result<ExpertLogits> {
        let per = singles
            .iter()
            .map(|m| m.predict_logits(data, &split.val, cfg.exec))
            .collect::<Result<Vec<_>>>()?;
        ExpertLogits::from_experts(&per, spec.out_dim())
    };
    let mixer = match strategy {
        Strategy::Moe => return Err(Error::usage("the moe strategy is trained, not assembled")),
        Strategy::Uniform => Mixer::Fixed(vec![1.0 / n as f64; n]),
        Strategy::ZeroShot => Mixer::Fixed(zero_shot_confidence_weights(&val_logits()?, &spec, &val_targets)?),
        Strategy::Greedy => Mixer::Fixed(greedy_search_weights(&val_logits()?, &spec, &val_targets, cfg.greedy_step)?),
        Strategy::SampleAware => {
            let inputs: Vec<Vec<f64>> = split.val.iter().map(|&i| data.gate_row(i).to_vec()).collect();
            let training = GateTraining {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                lr: cfg.lr,
                seed: derive_seed(seed, &format!("sample_aware/{task}")),
            };
            Mixer::Gate(sample_aware_weights_train(
                &cfg.gate,
                &inputs,
                &val_logits()?,
                &spec,
                &val_targets,
                &training,
            )?)
        }
    };
    assemble(singles, mixer)
}

/// Trains and evaluates every single expert and every requested strategy for
/// one task and one repeat.
pub fn run_repeat(
    data: &PreparedDataset,
    task: Task,
    cfg: &ExperimentConfig,
    repeat: usize,
    strategies: &[Strategy],
) -> Result<RepeatRun> {
    let seed = cfg.repeat_seed(repeat);
    let split = split(data.len(), cfg.split, seed)?;
    let n = data.n_experts();
    let t0 = Instant::now();
    let mut singles = Vec::with_capacity(n);
    for (e, (model, log)) in train_singles(data, &split, task, cfg, seed)?.into_iter().enumerate() {
        let test = evaluate(&model, data, &split.test, cfg.exec)?;
        singles.push(SingleRun {
            expert: e,
            model,
            log,
            test,
        });
    }
    let singles_s = t0.elapsed().as_secs_f64();
    let single_models: Vec<EnEcgModel> = singles.iter().map(|s| s.model.clone()).collect();
    let mut runs = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let t = Instant::now();
        let (built, log) = if strategy == Strategy::Moe {
            let (m, log) = train_moe(data, &split, task, cfg, seed, Some(&single_models))?;
            (Ok(m), Some(log))
        } else {
            (strategy_model(strategy, &single_models, data, &split, cfg, seed), None)
        };
        let outcome = match built {
            Ok(m) => {
                let e = evaluate(&m, data, &split.test, cfg.exec)?;
                Ok((m, e))
            }
            Err(Error::NotApplicable(why)) => Err(why),
            Err(e) => return Err(e),
        };
        let mut wallclock_s = t.elapsed().as_secs_f64();
        if strategy != Strategy::Moe || cfg.warm_start {
            wallclock_s += singles_s;
        }
        runs.push(StrategyRun {
            strategy,
            outcome,
            log,
            wallclock_s,
        });
    }
    Ok(RepeatRun {
        repeat,
        seed,
        split,
        singles,
        strategies: runs,
    })
}

/// [`run_repeat`] over every configured task and repeat.
pub fn run_suite(data: &PreparedDataset, cfg: &ExperimentConfig, strategies: &[Strategy]) -> Result<Vec<TaskRun>> {
    cfg.tasks
        .iter()
        .map(|&task| {
            let repeats = (0..cfg.repeats)
                .map(|r| run_repeat(data, task, cfg, r, strategies))
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskRun { task, repeats })
        })
        .collect()
}

/// Metrics of one strategy across tasks, with parameter counts and
/// throughput measured on the first repeat's model.
pub fn metrics_report(
    runs: &[TaskRun],
    strategy: Strategy,
    data: &PreparedDataset,
    roster: &[ExpertModel],
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for run in runs {
        let Some(values) = run.strategy_values(strategy) else {
            continue;
        };
        let first = &run.repeats[0];
        let sr = first
            .strategies
            .iter()
            .find(|s| s.strategy == strategy)
            .expect("strategy values exist");
        let (model, _) = sr.outcome.as_ref().expect("strategy applies");
        let eff = bench_cached(model, roster, data, &first.split.test, cfg.exec, 3)?;
        let st = Stat::new(values);
        let wall: f64 = run
            .repeats
            .iter()
            .flat_map(|r| r.strategies.iter().filter(|s| s.strategy == strategy))
            .map(|s| s.wallclock_s)
            .sum();
        let train_sps = sr.log.as_ref().map_or(0.0, TrainLog::train_throughput_sps);
        report.tasks.push(TaskReport {
            task: run.task,
            strategy,
            metric: run.task.metric(),
            mean: st.mean,
            std: st.std,
            values: st.values,
            params_trainable: eff.params_trainable,
            params_frozen: eff.params_frozen,
            params_total: eff.params_total,
            params_full_ffn: eff.params_full_ffn,
            throughput_sps: eff.throughput_sps,
            train_throughput_sps: train_sps,
            wallclock_s: wall,
            activation_bytes: eff.activation_bytes,
        });
    }
    Ok(report)
}

/// Default columns of the strategy comparison.
pub const COMPARISON_COLUMNS: [Strategy; 4] =
    [Strategy::ZeroShot, Strategy::Greedy, Strategy::SampleAware, Strategy::Moe];

pub fn comparison_report(runs: &[TaskRun], columns: &[Strategy], names: &[String]) -> ComparisonReport {
    let rows = runs
        .iter()
        .map(|run| ComparisonRow {
            task: run.task,
            metric: run.task.metric(),
            cells: columns.iter().map(|&c| run.strategy_values(c).map(Stat::new)).collect(),
            best_single: run.best_single().map(|(e, st)| {
                (names.get(e).cloned().unwrap_or_else(|| format!("expert{e}")), st)
            }),
        })
        .collect();
    ComparisonReport {
        columns: columns.to_vec(),
        rows,
    }
}
