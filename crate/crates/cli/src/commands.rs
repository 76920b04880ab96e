use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use enecg::adapters::Checkpoint;
use enecg::experts::ExpertModel;
use enecg::gating::Strategy;
use enecg::par::Exec;
use enecg::pipeline::{
    bench, bench_cached, bench_joint_cached, comparison_report, evaluate, evaluate_joint, init_model,
    metrics_report, prepare_generated, prepare_manifest, run_repeat, run_suite, split, train_joint, train_moe,
    EnEcgModel, Efficiency, ExperimentConfig, JointModel, MetricsReport, MixerInit, PreparedDataset, Split, Stat,
    TaskReport, TrainLog, COMPARISON_COLUMNS,
};
use enecg::saliency::{export_saliency, model_saliency, SaliencyTarget};
use enecg::signal::{load_records, manifest_files, save_generated, EcgRecord};
use enecg::task::Task;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Records per shard file written by `gen`.
pub const SHARD_SIZE: usize = 250;

/// Shared state of one invocation: the resolved configuration, the output
/// directory and every file written so far.
pub struct Context {
    pub rc: RunConfig,
    pub out: PathBuf,
    pub verbose: u8,
    written: Vec<PathBuf>,
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    files: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Context {
    pub fn new(rc: RunConfig, out: PathBuf, verbose: u8) -> CliResult<Self> {
        fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        Ok(Self {
            rc,
            out,
            verbose,
            written: Vec::new(),
        })
    }

    fn cfg(&self) -> &ExperimentConfig {
        &self.rc.experiment
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Writes `contents` to `rel` under the output directory.
    fn write(&mut self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.track(path.clone());
        Ok(path)
    }

    fn track(&mut self, path: PathBuf) {
        if !self.written.contains(&path) {
            self.written.push(path);
        }
    }

    /// Writes the effective-config echo and the manifest of every output.
    pub fn finish(&mut self, command: &str) -> CliResult<()> {
        let echo = self.rc.to_text();
        self.write("effective.cfg", echo)?;
        let mut files = Vec::with_capacity(self.written.len());
        let mut paths = self.written.clone();
        paths.sort();
        for p in paths {
            let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            let rel = p.strip_prefix(&self.out).unwrap_or(&p);
            files.push(ManifestEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        let m = RunManifest {
            command,
            seed: self.cfg().seed,
            files,
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        let path = self.out.join("manifest.json");
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    fn roster(&self) -> CliResult<Vec<ExpertModel>> {
        self.cfg()
            .experts
            .iter()
            .cloned()
            .map(|s| ExpertModel::build(s).map_err(CliError::from))
            .collect()
    }

    fn prepare(&self, roster: &[ExpertModel]) -> CliResult<PreparedDataset> {
        let cfg = self.cfg();
        let t = Instant::now();
        let data = match &self.rc.data_path {
            Some(p) => prepare_manifest(p, roster, &cfg.gate, cfg.exec)?,
            None => prepare_generated(&cfg.data, roster, &cfg.gate, cfg.exec)?,
        };
        self.log(format!("prepared {} records in {:.1}s", data.len(), t.elapsed().as_secs_f64()));
        Ok(data)
    }

    /// Raw records at dataset positions `idx`.
    fn raw_records(&self, idx: &[usize]) -> CliResult<Vec<EcgRecord>> {
        match &self.rc.data_path {
            None => idx
                .iter()
                .map(|&i| Ok(self.cfg().data.generate_record(i)?.0))
                .collect(),
            Some(p) => {
                let mut all = Vec::new();
                for f in manifest_files(p)? {
                    all.extend(load_records(f)?.into_iter().map(|(r, _)| r));
                }
                idx.iter()
                    .map(|&i| {
                        all.get(i)
                            .cloned()
                            .ok_or_else(|| CliError::usage(format!("record index {i} out of range")))
                    })
                    .collect()
            }
        }
    }

    fn repeat_split(&self, data: &PreparedDataset, repeat: usize) -> CliResult<Split> {
        let cfg = self.cfg();
        Ok(split(data.len(), cfg.split, cfg.repeat_seed(repeat))?)
    }

    /// Trains the configured strategy for one task and repeat.
    fn train_one(&self, data: &PreparedDataset, task: Task, repeat: usize) -> CliResult<(EnEcgModel, Option<TrainLog>)> {
        let cfg = self.cfg();
        if cfg.ensemble == Strategy::Moe {
            let sp = self.repeat_split(data, repeat)?;
            let (m, log) = train_moe(data, &sp, task, cfg, cfg.repeat_seed(repeat), None)?;
            return Ok((m, Some(log)));
        }
        let run = run_repeat(data, task, cfg, repeat, &[cfg.ensemble])?;
        let sr = run.strategies.into_iter().next().expect("one strategy requested");
        match sr.outcome {
            Ok((m, _)) => Ok((m, None)),
            Err(why) => Err(CliError::usage(format!("{} on {task}: {why}", cfg.ensemble))),
        }
    }
}

fn model_path(dir: &Path, task: Task, repeat: usize) -> PathBuf {
    dir.join(format!("{task}_r{repeat}.ckpt"))
}

fn log_path(dir: &Path, task: Task, repeat: usize) -> PathBuf {
    dir.join(format!("{task}_r{repeat}.log.json"))
}

fn joint_path(dir: &Path, repeat: usize) -> PathBuf {
    dir.join(format!("joint_r{repeat}.ckpt"))
}

fn joint_log_path(dir: &Path, repeat: usize) -> PathBuf {
    dir.join(format!("joint_r{repeat}.log.json"))
}

fn parse_error(message: String) -> CliError {
    CliError::new(crate::error::ErrorClass::Parse, message)
}

fn read_log(path: &Path) -> CliResult<Option<TrainLog>> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| parse_error(format!("train log: {e}"))),
        Err(_) => Ok(None),
    }
}

fn check_joint(cfg: &ExperimentConfig) -> CliResult<()> {
    if cfg.ensemble != Strategy::Moe {
        return Err(CliError::usage("joint training needs ensemble = moe"));
    }
    Ok(())
}

fn task_report(task: Task, cfg: &ExperimentConfig, values: Vec<f64>, eff: &Efficiency, train_sps: f64, wall: f64) -> TaskReport {
    let st = Stat::new(values);
    TaskReport {
        task,
        strategy: cfg.ensemble,
        metric: task.metric(),
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
    }
}

pub fn gen(ctx: &mut Context) -> CliResult<()> {
    if ctx.rc.data_path.is_some() {
        return Err(CliError::usage("gen writes a new dataset; remove `path` from [data]"));
    }
    let dir = ctx.out.join("data");
    let t = Instant::now();
    let cfg = ctx.cfg().clone();
    let manifest = save_generated(&dir, &cfg.data, SHARD_SIZE, cfg.exec)?;
    for f in manifest_files(&manifest)? {
        ctx.track(f);
    }
    ctx.track(manifest);
    ctx.log(format!("generated {} records in {:.1}s", cfg.data.n_records, t.elapsed().as_secs_f64()));
    ctx.finish("gen")
}

pub fn train(ctx: &mut Context) -> CliResult<()> {
    let roster = ctx.roster()?;
    let data = ctx.prepare(&roster)?;
    let cfg = ctx.cfg().clone();
    if cfg.joint {
        check_joint(&cfg)?;
        for r in 0..cfg.repeats {
            let t = Instant::now();
            let sp = ctx.repeat_split(&data, r)?;
            let (model, log) = train_joint(&data, &sp, &cfg, cfg.repeat_seed(r))?;
            ctx.write(joint_path(Path::new("models"), r), model.to_checkpoint().to_text())?;
            let json = serde_json::to_string_pretty(&log).expect("log serializes");
            ctx.write(joint_log_path(Path::new("models"), r), json)?;
            ctx.log(format!("joint repeat {r}: {:.1}s", t.elapsed().as_secs_f64()));
        }
        return ctx.finish("train");
    }
    for &task in &cfg.tasks {
        for r in 0..cfg.repeats {
            let t = Instant::now();
            let (model, log) = ctx.train_one(&data, task, r)?;
            ctx.write(model_path(Path::new("models"), task, r), model.to_checkpoint().to_text())?;
            if let Some(log) = log {
                let json = serde_json::to_string_pretty(&log).expect("log serializes");
                ctx.write(log_path(Path::new("models"), task, r), json)?;
            }
            ctx.log(format!("{task} repeat {r}: {:.1}s", t.elapsed().as_secs_f64()));
        }
    }
    ctx.finish("train")
}

pub fn eval(ctx: &mut Context, models: Option<PathBuf>) -> CliResult<()> {
    let models = models.unwrap_or_else(|| ctx.out.join("models"));
    let roster = ctx.roster()?;
    let data = ctx.prepare(&roster)?;
    let cfg = ctx.cfg().clone();
    let report = if cfg.joint {
        eval_joint(ctx, &models, &roster, &data)?
    } else {
        eval_tasks(ctx, &models, &roster, &data)?
    };
    ctx.write("metrics.json", report.to_json())?;
    ctx.write("metrics.csv", report.to_csv())?;
    ctx.finish("eval")
}

fn eval_tasks(ctx: &Context, models: &Path, roster: &[ExpertModel], data: &PreparedDataset) -> CliResult<MetricsReport> {
    let cfg = ctx.cfg();
    let mut report = MetricsReport::default();
    for &task in &cfg.tasks {
        let mut values = Vec::with_capacity(cfg.repeats);
        let mut first: Option<(EnEcgModel, Split)> = None;
        let mut wall = 0.0;
        let mut train_sps = 0.0;
        for r in 0..cfg.repeats {
            let ck = Checkpoint::load(model_path(models, task, r))?;
            let model = EnEcgModel::from_checkpoint(&ck)?;
            if model.task() != task {
                return Err(parse_error(format!("checkpoint for {task} repeat {r} holds a {} model", model.task())));
            }
            let sp = ctx.repeat_split(data, r)?;
            values.push(evaluate(&model, data, &sp.test, cfg.exec)?.value);
            if let Some(log) = read_log(&log_path(models, task, r))? {
                wall += log.wallclock_s;
                if r == 0 {
                    train_sps = log.train_throughput_sps();
                }
            }
            if first.is_none() {
                first = Some((model, sp));
            }
        }
        let (model, sp) = first.ok_or_else(|| CliError::usage("repeats must be positive"))?;
        let eff = bench_cached(&model, roster, data, &sp.test, cfg.exec, 3)?;
        let row = task_report(task, cfg, values, &eff, train_sps, wall);
        ctx.log(format!("{task}: {} {:.4} ± {:.4}", task.metric().name(), row.mean, row.std));
        report.tasks.push(row);
    }
    Ok(report)
}

/// Every task row shares the joint model's counts, throughput and training
/// time.
fn eval_joint(ctx: &Context, models: &Path, roster: &[ExpertModel], data: &PreparedDataset) -> CliResult<MetricsReport> {
    let cfg = ctx.cfg();
    check_joint(cfg)?;
    let mut values = vec![Vec::with_capacity(cfg.repeats); cfg.tasks.len()];
    let mut first: Option<(JointModel, Split)> = None;
    let mut wall = 0.0;
    let mut train_sps = 0.0;
    for r in 0..cfg.repeats {
        let ck = Checkpoint::load(joint_path(models, r))?;
        let model = JointModel::from_checkpoint(&ck)?;
        if model.tasks() != cfg.tasks {
            return Err(parse_error(format!(
                "joint checkpoint for repeat {r} covers {:?}, configuration lists {:?}",
                model.tasks(),
                cfg.tasks
            )));
        }
        let sp = ctx.repeat_split(data, r)?;
        for (dst, ev) in values.iter_mut().zip(evaluate_joint(&model, data, &sp.test, cfg.exec)?) {
            dst.push(ev.value);
        }
        if let Some(log) = read_log(&joint_log_path(models, r))? {
            wall += log.wallclock_s;
            if r == 0 {
                train_sps = log.train_throughput_sps();
            }
        }
        if first.is_none() {
            first = Some((model, sp));
        }
    }
    let (model, sp) = first.ok_or_else(|| CliError::usage("repeats must be positive"))?;
    let eff = bench_joint_cached(&model, roster, data, &sp.test, cfg.exec, 3)?;
    let mut report = MetricsReport::default();
    for (&task, v) in cfg.tasks.iter().zip(values) {
        let row = task_report(task, cfg, v, &eff, train_sps, wall);
        ctx.log(format!("{task}: {} {:.4} ± {:.4}", task.metric().name(), row.mean, row.std));
        report.tasks.push(row);
    }
    Ok(report)
}

#[derive(Serialize)]
struct BenchRow {
    task: Task,
    records: usize,
    parallel: Efficiency,
    sequential: Efficiency,
    speedup: f64,
}

pub fn bench_cmd(ctx: &mut Context, records: usize, passes: usize) -> CliResult<()> {
    if records == 0 {
        return Err(CliError::usage("--records must be positive"));
    }
    let roster = ctx.roster()?;
    let data = ctx.prepare(&roster)?;
    let cfg = ctx.cfg().clone();
    let sp = ctx.repeat_split(&data, 0)?;
    let idx: Vec<usize> = sp.test.iter().copied().take(records).collect();
    let raw = ctx.raw_records(&idx)?;
    let all: Vec<usize> = (0..data.n_experts()).collect();
    let mut rows = Vec::new();
    let mut csv = String::from(
        "task,records,params_trainable,params_frozen,params_total,params_expert,params_full_ffn,lora_fraction,throughput_parallel_sps,throughput_sequential_sps,activation_bytes\n",
    );
    for &task in &cfg.tasks {
        let model = init_model(&data, &sp, task, &all, MixerInit::Gate(cfg.gate.clone()), &cfg, cfg.repeat_seed(0))?;
        let par = bench(&model, &roster, &raw, Exec::Parallel, passes)?;
        let seq = bench(&model, &roster, &raw, Exec::Sequential, passes)?;
        csv.push_str(&format!(
            "{task},{},{},{},{},{},{},{},{},{},{}\n",
            raw.len(),
            par.params_trainable,
            par.params_frozen,
            par.params_total,
            par.params_expert,
            par.params_full_ffn,
            par.lora_fraction,
            par.throughput_sps,
            seq.throughput_sps,
            par.activation_bytes
        ));
        ctx.log(format!(
            "{task}: {} trainable of {}, {:.1} samples/s parallel, {:.1} sequential",
            par.params_trainable, par.params_total, par.throughput_sps, seq.throughput_sps
        ));
        rows.push(BenchRow {
            task,
            records: raw.len(),
            speedup: par.throughput_sps / seq.throughput_sps,
            parallel: par,
            sequential: seq,
        });
    }
    ctx.write("bench.json", serde_json::to_string_pretty(&rows).expect("bench serializes"))?;
    ctx.write("bench.csv", csv)?;
    ctx.finish("bench")
}

pub fn compare(ctx: &mut Context) -> CliResult<()> {
    let roster = ctx.roster()?;
    let data = ctx.prepare(&roster)?;
    let cfg = ctx.cfg().clone();
    let t = Instant::now();
    let runs = run_suite(&data, &cfg, &COMPARISON_COLUMNS)?;
    ctx.log(format!("suite finished in {:.1}s", t.elapsed().as_secs_f64()));
    let names: Vec<String> = cfg.experts.iter().map(|e| e.name.clone()).collect();
    let report = comparison_report(&runs, &COMPARISON_COLUMNS, &names);
    let table = report.to_table();
    print!("{table}");
    ctx.write("comparison.json", report.to_json())?;
    ctx.write("comparison.csv", report.to_csv())?;
    ctx.write("comparison.txt", table)?;
    let moe = metrics_report(&runs, Strategy::Moe, &data, &roster, &cfg)?;
    ctx.write("metrics.json", moe.to_json())?;
    ctx.write("metrics.csv", moe.to_csv())?;
    ctx.finish("compare-ensembles")
}

pub struct SaliencyArgs {
    pub task: Option<Task>,
    pub record: Option<usize>,
    pub steps: usize,
    pub target: SaliencyTarget,
    pub models: Option<PathBuf>,
}

pub fn saliency(ctx: &mut Context, args: SaliencyArgs) -> CliResult<()> {
    let cfg = ctx.cfg().clone();
    let task = args.task.unwrap_or(cfg.tasks[0]);
    let roster = ctx.roster()?;
    let data = ctx.prepare(&roster)?;
    let sp = ctx.repeat_split(&data, 0)?;
    let record = match args.record {
        Some(i) if i < data.len() => i,
        Some(i) => return Err(CliError::usage(format!("record {i} out of range for {} records", data.len()))),
        None => sp.test[0],
    };
    if cfg.joint && args.models.is_some() {
        return Err(CliError::usage("saliency reads per-task checkpoints; joint checkpoints are not supported"));
    }
    let ckpt = args.models.as_deref().map(|d| model_path(d, task, 0));
    let model = match ckpt {
        Some(p) => EnEcgModel::from_checkpoint(&Checkpoint::load(p)?)?,
        None => ctx.train_one(&data, task, 0)?.0,
    };
    let raw = ctx.raw_records(&[record])?.remove(0);
    let t = Instant::now();
    let map = model_saliency(&model, &roster, &raw.leads, args.target, args.steps, cfg.exec)?;
    ctx.log(format!(
        "{task} record {record}: completeness gap {:.3e} ({:.3e} relative) in {:.1}s",
        map.completeness_gap,
        map.relative_gap(),
        t.elapsed().as_secs_f64()
    ));
    let stem = format!("saliency_{task}_{}", raw.record_id);
    let csv = ctx.out.join(format!("{stem}.csv"));
    export_saliency(&map, &csv)?;
    ctx.track(csv);
    ctx.track(ctx.out.join(format!("{stem}.json")));
    ctx.finish("saliency")
}
