//! Sectioned `key = value` configuration files.
//!
//! ```text
//! # comment
//! [experiment]
//! seed = 7
//! tasks = rr,age,sex,potassium,arrhythmia
//! split = 0.7,0.2,0.1
//! ensemble = moe
//!
//! [data]
//! n_records = 10000
//!
//! [expert.spectral]
//! arch = spectral
//! seed = 101
//! ```
//!
//! Keys before the first header belong to `[experiment]`. Unknown sections
//! and keys are errors. When any `[expert.NAME]` section is present it
//! replaces the default roster, in file order.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use enecg::experts::{Architecture, ExpertSpec};
use enecg::par::Exec;
use enecg::pipeline::{check_split, ExperimentConfig};
use enecg::task::Task;

use crate::error::{CliError, CliResult};

/// Environment variable consulted when neither flag nor file sets a seed.
pub const SEED_ENV: &str = "ENECG_SEED";

/// A parsed configuration file.
#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    /// Dataset manifest to load instead of generating records.
    pub data_path: Option<PathBuf>,
    seed_set: bool,
    data_seed_set: bool,
}


struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn err(&self, what: impl std::fmt::Display) -> CliError {
        CliError::config(format!("key `{}` at line {}: {what}", self.key, self.line))
    }

    fn get<T: FromStr>(&self, expected: &str) -> CliResult<T> {
        self.value
            .parse()
            .map_err(|_| self.err(format!("expected {expected}, got `{}`", self.value)))
    }

    fn list<T: FromStr>(&self, expected: &str) -> CliResult<Vec<T>> {
        self.value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| self.err(format!("expected a comma-separated list of {expected}, got `{}`", self.value)))
            })
            .collect()
    }

    fn pair(&self) -> CliResult<(f64, f64)> {
        match self.list::<f64>("numbers")?[..] {
            [a, b] => Ok((a, b)),
            _ => Err(self.err("expected two comma-separated numbers")),
        }
    }

    fn flag(&self) -> CliResult<bool> {
        match self.value {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(self.err(format!("expected true or false, got `{v}`"))),
        }
    }
}

enum Section {
    Experiment,
    Data,
    Head,
    Gate,
    Expert(usize),
}

struct PendingExpert {
    name: String,
    line: usize,
    arch: Option<Architecture>,
    seed: Option<u64>,
    input_len: Option<usize>,
    feature_dim: Option<usize>,
    n_leads: Option<usize>,
}

fn parse_exec(e: &Entry) -> CliResult<Exec> {
    match e.value {
        "parallel" => Ok(Exec::Parallel),
        "sequential" => Ok(Exec::Sequential),
        v => Err(e.err(format!("expected parallel or sequential, got `{v}`"))),
    }
}

fn exec_name(x: Exec) -> &'static str {
    match x {
        Exec::Parallel => "parallel",
        Exec::Sequential => "sequential",
    }
}

fn parse_tasks(e: &Entry) -> CliResult<Vec<Task>> {
    if e.value == "all" {
        return Ok(Task::ALL.to_vec());
    }
    let tasks: Vec<Task> = e.list("task names")?;
    if tasks.is_empty() {
        return Err(e.err("at least one task is required"));
    }
    Ok(tasks)
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut rc = RunConfig::default();
        let cfg = &mut rc.experiment;
        let mut section = Section::Experiment;
        let mut seen = BTreeSet::new();
        let mut section_name = String::from("experiment");
        let mut experts: Vec<PendingExpert> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(head) = body.strip_prefix('[') {
                let name = head
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::config(format!("line {line}: unterminated section header")))?
                    .trim();
                section = match name {
                    "experiment" => Section::Experiment,
                    "data" => Section::Data,
                    "head" => Section::Head,
                    "gate" => Section::Gate,
                    _ => match name.strip_prefix("expert.") {
                        Some(n) if !n.is_empty() => {
                            if experts.iter().any(|e| e.name == n) {
                                return Err(CliError::config(format!("line {line}: duplicate section [{name}]")));
                            }
                            experts.push(PendingExpert {
                                name: n.to_string(),
                                line,
                                arch: None,
                                seed: None,
                                input_len: None,
                                feature_dim: None,
                                n_leads: None,
                            });
                            Section::Expert(experts.len() - 1)
                        }
                        _ => return Err(CliError::config(format!("line {line}: unknown section [{name}]"))),
                    },
                };
                section_name = name.to_string();
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {line}: expected `key = value`, got `{body}`")))?;
            let e = Entry {
                line,
                key: key.trim(),
                value: value.trim(),
            };
            if e.value.is_empty() {
                return Err(e.err("missing value"));
            }
            if !seen.insert(format!("{section_name}.{}", e.key)) {
                return Err(e.err(format!("set twice in [{section_name}]")));
            }
            let unknown = || e.err(format!("unknown key in [{section_name}]"));
            match section {
                Section::Experiment => match e.key {
                    "seed" => {
                        cfg.seed = e.get("an unsigned integer")?;
                        rc.seed_set = true;
                    }
                    "tasks" => cfg.tasks = parse_tasks(&e)?,
                    "split" => {
                        let v: Vec<f64> = e.list("numbers")?;
                        let ratios: [f64; 3] = v.try_into().map_err(|_| e.err("expected three ratios"))?;
                        check_split(ratios).map_err(|err| match err {
                            enecg::Error::Usage(m) => e.err(m),
                            other => e.err(other),
                        })?;
                        cfg.split = ratios;
                    }
                    "epochs" => cfg.epochs = e.get("an unsigned integer")?,
                    "batch_size" => cfg.batch_size = e.get("an unsigned integer")?,
                    "lr" => cfg.lr = e.get("a number")?,
                    "ensemble" => cfg.ensemble = e.get("moe, zero_shot, greedy, sample_aware or uniform")?,
                    "class_weighting" => cfg.class_weighting = e.flag()?,
                    "repeats" => cfg.repeats = e.get("an unsigned integer")?,
                    "joint" => cfg.joint = e.flag()?,
                    "warm_start" => cfg.warm_start = e.flag()?,
                    "greedy_step" => cfg.greedy_step = e.get("a number")?,
                    "exec" => cfg.exec = parse_exec(&e)?,
                    _ => return Err(unknown()),
                },
                Section::Data => {
                    let d = &mut cfg.data;
                    match e.key {
                        "path" => rc.data_path = Some(PathBuf::from(e.value)),
                        "seed" => {
                            d.seed = e.get("an unsigned integer")?;
                            rc.data_seed_set = true;
                        }
                        "n_records" => d.n_records = e.get("an unsigned integer")?,
                        "duration_s" => d.duration_s = e.get("a number")?,
                        "sampling_rate_hz" => d.sampling_rate_hz = e.get("a number")?,
                        "heart_rate_bpm" => d.heart_rate_bpm = e.pair()?,
                        "qt_range_s" => d.qt_range_s = e.pair()?,
                        "age_noise" => d.age_noise = e.get("a number")?,
                        "p_amplitude_by_sex" => d.p_amplitude_by_sex = e.pair()?,
                        "sex_prevalence" => d.sex_prevalence = e.get("a number")?,
                        "potassium_prevalence" => d.potassium_prevalence = e.get("a number")?,
                        "potassium_t_factor" => d.potassium_t_factor = e.get("a number")?,
                        "noise_mv" => d.noise_mv = e.get("a number")?,
                        "baseline_wander_mv" => d.baseline_wander_mv = e.get("a number")?,
                        _ => return Err(unknown()),
                    }
                }
                Section::Head => {
                    let h = &mut cfg.head;
                    match e.key {
                        "hidden" => h.hidden = e.get("an unsigned integer")?,
                        "rank" => h.rank = e.get("an unsigned integer")?,
                        "depth" => h.depth = e.get("1 or 2")?,
                        "train_bias" => h.train_bias = e.flag()?,
                        "lora_only" => h.lora_only = e.flag()?,
                        _ => return Err(unknown()),
                    }
                }
                Section::Gate => {
                    let g = &mut cfg.gate;
                    match e.key {
                        "leads" => g.leads = e.list("lead indices")?,
                        "pooled_len" => g.pooled_len = e.get("an unsigned integer")?,
                        "hidden" => g.hidden = e.get("an unsigned integer")?,
                        "rank" => g.rank = e.get("an unsigned integer")?,
                        "per_coordinate" => g.per_coordinate = e.flag()?,
                        "lora_only" => g.lora_only = e.flag()?,
                        "train_bias" => g.train_bias = e.flag()?,
                        _ => return Err(unknown()),
                    }
                }
                Section::Expert(k) => {
                    let x = &mut experts[k];
                    match e.key {
                        "arch" => x.arch = Some(e.get("spectral, convolutional or statistical")?),
                        "seed" => x.seed = Some(e.get("an unsigned integer")?),
                        "input_len" => x.input_len = Some(e.get("an unsigned integer")?),
                        "feature_dim" => x.feature_dim = Some(e.get("an unsigned integer")?),
                        "n_leads" => x.n_leads = Some(e.get("an unsigned integer")?),
                        _ => return Err(unknown()),
                    }
                }
            }
        }
        if !experts.is_empty() {
            cfg.experts = experts
                .into_iter()
                .enumerate()
                .map(|(i, x)| {
                    let arch = x.arch.ok_or_else(|| {
                        CliError::config(format!(
                            "missing required key `arch` in [expert.{}] (line {})",
                            x.name, x.line
                        ))
                    })?;
                    let mut spec = ExpertSpec::new(x.name, arch, x.seed.unwrap_or(101 * (i as u64 + 1)));
                    spec.input_len = x.input_len.unwrap_or(spec.input_len);
                    spec.feature_dim = x.feature_dim.unwrap_or(spec.feature_dim);
                    spec.n_leads = x.n_leads.unwrap_or(spec.n_leads);
                    Ok(spec)
                })
                .collect::<CliResult<Vec<_>>>()?;
        }
        if !rc.data_seed_set {
            cfg.data.seed = cfg.seed;
        }
        Ok(rc)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies the seed precedence: flag, then file, then [`SEED_ENV`].
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> CliResult<()> {
        let seed = match (flag, self.seed_set, env) {
            (Some(s), _, _) => s,
            (None, true, _) => return Ok(()),
            (None, false, Some(v)) => v
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?,
            (None, false, None) => return Ok(()),
        };
        self.experiment.seed = seed;
        if !self.data_seed_set {
            self.experiment.data.seed = seed;
        }
        Ok(())
    }

    /// Full validation after all overrides.
    pub fn validate(&self) -> CliResult<()> {
        self.experiment
            .validate()
            .map_err(|e| CliError::config(format!("invalid configuration: {}", strip_class(&e))))
    }

    /// Every setting, in the file format, so that parsing it back gives the
    /// same configuration.
    pub fn to_text(&self) -> String {
        let c = &self.experiment;
        let d = &c.data;
        let mut s = String::from("# effective configuration\n[experiment]\n");
        let tasks: Vec<String> = c.tasks.iter().map(|t| t.to_string()).collect();
        let w = &mut s;
        writeln!(w, "seed = {}", c.seed).unwrap();
        writeln!(w, "tasks = {}", tasks.join(",")).unwrap();
        writeln!(w, "split = {},{},{}", c.split[0], c.split[1], c.split[2]).unwrap();
        writeln!(w, "epochs = {}", c.epochs).unwrap();
        writeln!(w, "batch_size = {}", c.batch_size).unwrap();
        writeln!(w, "lr = {}", c.lr).unwrap();
        writeln!(w, "ensemble = {}", c.ensemble).unwrap();
        writeln!(w, "class_weighting = {}", c.class_weighting).unwrap();
        writeln!(w, "repeats = {}", c.repeats).unwrap();
        writeln!(w, "joint = {}", c.joint).unwrap();
        writeln!(w, "warm_start = {}", c.warm_start).unwrap();
        writeln!(w, "greedy_step = {}", c.greedy_step).unwrap();
        writeln!(w, "exec = {}", exec_name(c.exec)).unwrap();
        w.push_str("\n[data]\n");
        if let Some(p) = &self.data_path {
            writeln!(w, "path = {}", p.display()).unwrap();
        }
        writeln!(w, "seed = {}", d.seed).unwrap();
        writeln!(w, "n_records = {}", d.n_records).unwrap();
        writeln!(w, "duration_s = {}", d.duration_s).unwrap();
        writeln!(w, "sampling_rate_hz = {}", d.sampling_rate_hz).unwrap();
        writeln!(w, "heart_rate_bpm = {},{}", d.heart_rate_bpm.0, d.heart_rate_bpm.1).unwrap();
        writeln!(w, "qt_range_s = {},{}", d.qt_range_s.0, d.qt_range_s.1).unwrap();
        writeln!(w, "age_noise = {}", d.age_noise).unwrap();
        writeln!(w, "p_amplitude_by_sex = {},{}", d.p_amplitude_by_sex.0, d.p_amplitude_by_sex.1).unwrap();
        writeln!(w, "sex_prevalence = {}", d.sex_prevalence).unwrap();
        writeln!(w, "potassium_prevalence = {}", d.potassium_prevalence).unwrap();
        writeln!(w, "potassium_t_factor = {}", d.potassium_t_factor).unwrap();
        writeln!(w, "noise_mv = {}", d.noise_mv).unwrap();
        writeln!(w, "baseline_wander_mv = {}", d.baseline_wander_mv).unwrap();
        let h = &c.head;
        w.push_str("\n[head]\n");
        writeln!(w, "hidden = {}", h.hidden).unwrap();
        writeln!(w, "rank = {}", h.rank).unwrap();
        writeln!(w, "depth = {}", h.depth).unwrap();
        writeln!(w, "train_bias = {}", h.train_bias).unwrap();
        writeln!(w, "lora_only = {}", h.lora_only).unwrap();
        let g = &c.gate;
        let leads: Vec<String> = g.leads.iter().map(|l| l.to_string()).collect();
        w.push_str("\n[gate]\n");
        writeln!(w, "leads = {}", leads.join(",")).unwrap();
        writeln!(w, "pooled_len = {}", g.pooled_len).unwrap();
        writeln!(w, "hidden = {}", g.hidden).unwrap();
        writeln!(w, "rank = {}", g.rank).unwrap();
        writeln!(w, "per_coordinate = {}", g.per_coordinate).unwrap();
        writeln!(w, "lora_only = {}", g.lora_only).unwrap();
        writeln!(w, "train_bias = {}", g.train_bias).unwrap();
        for x in &c.experts {
            writeln!(w, "\n[expert.{}]", x.name).unwrap();
            writeln!(w, "arch = {}", x.arch).unwrap();
            writeln!(w, "seed = {}", x.seed).unwrap();
            writeln!(w, "input_len = {}", x.input_len).unwrap();
            writeln!(w, "feature_dim = {}", x.feature_dim).unwrap();
            writeln!(w, "n_leads = {}", x.n_leads).unwrap();
        }
        s
    }
}

/// Core error text without its class prefix.
fn strip_class(e: &enecg::Error) -> String {
    match e {
        enecg::Error::Usage(m) | enecg::Error::Dimension(m) | enecg::Error::NotApplicable(m) => m.clone(),
        other => other.to_string(),
    }
}
