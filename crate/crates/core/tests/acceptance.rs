//! Release acceptance: ten criteria, one PASS/FAIL line each. Exits nonzero
//! if any criterion fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use enecg::adapters::{lora_param_count, Checkpoint, LoraLinear};
use enecg::experts::ExpertModel;
use enecg::gating::{combine, ensemble_combine, GateConfig, GatingNetwork, Strategy};
use enecg::numerics::{finite_diff_grad, relative_error, Tape, Tensor, Var};
use enecg::par::Exec;
use enecg::pipeline::{
    assemble, bench, comparison_report, init_model, metrics_report, prepare_generated, prepare_records, run_repeat,
    run_suite, split, train_singles, fit, EnEcgModel, ExperimentConfig, JointModel, Mixer, MixerInit,
    PreparedDataset, TaskRun, TrainOptions, COMPARISON_COLUMNS, NOT_APPLICABLE,
};
use enecg::saliency::{integrated_gradients, model_saliency, SaliencyTarget};
use enecg::signal::{load_records, save_generated, save_records, EcgRecord, LabelSet};
use enecg::task::{Task, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        // Negated on purpose so a NaN comparison fails the check.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        let failed = !$cond;
        if failed {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- fixtures

struct Small {
    cfg: ExperimentConfig,
    roster: Vec<ExpertModel>,
    records: Vec<(EcgRecord, LabelSet)>,
    data: PreparedDataset,
}

fn small() -> &'static Small {
    static S: OnceLock<Small> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = ExperimentConfig::small(240);
        let roster: Vec<ExpertModel> = cfg.experts.iter().cloned().map(|s| ExpertModel::build(s).unwrap()).collect();
        let records = cfg.data.generate(Exec::Parallel).unwrap();
        let data = prepare_records(&records, &roster, &cfg.gate, Exec::Parallel).unwrap();
        Small {
            cfg,
            roster,
            records,
            data,
        }
    })
}

/// The default suite: 10k records, three seeds, every strategy.
struct Suite {
    cfg: ExperimentConfig,
    roster: Vec<ExpertModel>,
    data: PreparedDataset,
    runs: Vec<TaskRun>,
    expert_sums_before: Vec<String>,
    seconds: f64,
}

fn suite() -> Result<&'static Suite, String> {
    static S: OnceLock<Result<Suite, String>> = OnceLock::new();
    S.get_or_init(|| {
        let t = Instant::now();
        let cfg = ExperimentConfig::default();
        let roster: Vec<ExpertModel> =
            ok(cfg.experts.iter().cloned().map(ExpertModel::build).collect::<Result<Vec<_>, _>>())?;
        let expert_sums_before = roster.iter().map(ExpertModel::checksum).collect();
        let data = ok(prepare_generated(&cfg.data, &roster, &cfg.gate, cfg.exec))?;
        let runs = ok(run_suite(&data, &cfg, &COMPARISON_COLUMNS))?;
        Ok(Suite {
            cfg,
            roster,
            data,
            runs,
            expert_sums_before,
            seconds: t.elapsed().as_secs_f64(),
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

/// Moves every `B` of heads and gate away from zero.
fn perturb(params: Vec<&mut Tensor>, rng: &mut ChaCha8Rng) {
    for t in params {
        let v = Tensor::uniform(t.shape(), 0.3, rng);
        t.assign(v.data()).unwrap();
    }
}

fn perturb_b(m: &mut EnEcgModel, rng: &mut ChaCha8Rng) {
    let mut bs: Vec<&mut Tensor> = m.heads.iter_mut().flat_map(|h| h.layers.iter_mut().map(|l| &mut l.b)).collect();
    if let Mixer::Gate(g) = &mut m.mixer {
        bs.extend(g.layers.iter_mut().map(|l| &mut l.b));
    }
    perturb(bs, rng);
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------- 1

type Build = dyn Fn(&mut Tape, &[Var]) -> enecg::Result<Var>;

fn weighted_sum(build: &Build, inputs: &[Tensor], weights: &[f64], tape: &mut Tape) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.variable(t.shape(), t.data().to_vec()).unwrap())
        .collect();
    let out = build(tape, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let w = tape.constant(&shape, weights[..n].to_vec()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    (tape.sum(prod).unwrap(), vars)
}

fn primitive_error(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let (loss, vars) = weighted_sum(build, inputs, &weights, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).unwrap().to_vec();
        let fd = finite_diff_grad(
            |probe| {
                let mut ins = inputs.to_vec();
                ins[i] = probe.clone();
                let mut t = Tape::new();
                let (l, _) = weighted_sum(build, &ins, &weights, &mut t);
                t.value(l)[0]
            },
            &inputs[i],
            1e-5,
        );
        worst = worst.max(relative_error(&analytic, fd.data()));
    }
    worst
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Box<Build>, Vec<Tensor>)> {
    let mut r = |shape: &[usize]| Tensor::uniform(shape, 1.0, rng);
    vec![
        ("matmul", Box::new(|t, v| t.matmul(v[0], v[1])), vec![r(&[3, 4]), r(&[4, 2])]),
        ("transpose", Box::new(|t, v| t.transpose(v[0])), vec![r(&[3, 5])]),
        ("add", Box::new(|t, v| t.add(v[0], v[1])), vec![r(&[4, 3]), r(&[3])]),
        ("sub", Box::new(|t, v| t.sub(v[0], v[1])), vec![r(&[2, 3]), r(&[2, 3])]),
        ("mul", Box::new(|t, v| t.mul(v[0], v[1])), vec![r(&[2, 3, 4]), r(&[3, 4])]),
        ("scale", Box::new(|t, v| t.scale(v[0], 1.7)), vec![r(&[5])]),
        ("relu", Box::new(|t, v| t.relu(v[0])), vec![r(&[12])]),
        (
            "sqrt",
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                let c = t.constant(&[1], vec![0.5])?;
                let s = t.add(sq, c)?;
                t.sqrt(s)
            }),
            vec![r(&[6])],
        ),
        ("sum", Box::new(|t, v| t.sum(v[0])), vec![r(&[3, 2])]),
        ("mean", Box::new(|t, v| t.mean(v[0])), vec![r(&[3, 2])]),
        ("sum_axis", Box::new(|t, v| t.sum_axis(v[0], 1)), vec![r(&[2, 3, 4])]),
        ("softmax", Box::new(|t, v| t.softmax(v[0], 1)), vec![r(&[2, 3, 4])]),
        ("conv1d", Box::new(|t, v| t.conv1d(v[0], v[1], 2)), vec![r(&[2, 17]), r(&[3, 2, 4])]),
        ("mean_pool", Box::new(|t, v| t.mean_pool(v[0], 4)), vec![r(&[2, 12])]),
        ("max_pool", Box::new(|t, v| t.max_pool(v[0], 3)), vec![r(&[2, 12])]),
        ("dft_magnitude", Box::new(|t, v| t.dft_magnitude(v[0], 5)), vec![r(&[2, 20])]),
        ("slice", Box::new(|t, v| t.slice(v[0], 2, 1, 3)), vec![r(&[2, 2, 4])]),
        ("concat", Box::new(|t, v| t.concat(&[v[0], v[1]], 0)), vec![r(&[2, 3]), r(&[1, 3])]),
        ("reshape", Box::new(|t, v| t.reshape(v[0], &[6])), vec![r(&[2, 3])]),
        (
            "bce_with_logits",
            Box::new(|t, v| t.bce_with_logits(v[0], &[0.0, 1.0, 1.0], &[1.0, 4.0, 4.0])),
            vec![r(&[3])],
        ),
        ("cross_entropy", Box::new(|t, v| t.cross_entropy(v[0], &[1, 0, 3])), vec![r(&[3, 4])]),
    ]
}

trait Params {
    fn params(&mut self) -> Vec<&mut Tensor>;
}

impl Params for JointModel {
    fn params(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.members.iter_mut().flat_map(EnEcgModel::trainable_mut).collect();
        v.extend(self.gate.trainable_mut());
        v
    }
}

/// Gradient of the summed task losses with respect to every trainable
/// tensor of a joint model, analytic vs central differences.
fn joint_loss_error(jm: &JointModel, data: &PreparedDataset, idx: &[usize]) -> Result<f64, String> {
    let loss_of = |m: &JointModel| -> (Tape, Var) {
        let mut tape = Tape::new();
        let outs = m.forward_cached(&mut tape, data, idx).unwrap();
        let mut total: Option<Var> = None;
        for (mem, o) in m.members.iter().zip(outs) {
            let l = mem.spec.loss(&mut tape, o.combined, &data.targets(mem.task(), idx)).unwrap();
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l).unwrap(),
            });
        }
        (tape, total.unwrap())
    };
    let (tape, l) = loss_of(jm);
    let grads = ok(tape.backward(l))?;
    let n = jm.clone().params().len();
    let mut worst: f64 = 0.0;
    for p in 0..n {
        let target = jm.clone().params().swap_remove(p).clone();
        let analytic = grads.param(target.id()).ok_or("parameter missing from tape")?.to_vec();
        let fd = finite_diff_grad(
            |x| {
                let mut h = jm.clone();
                h.params().swap_remove(p).assign(x.data()).unwrap();
                let (t, l) = loss_of(&h);
                t.value(l)[0]
            },
            &target,
            1e-5,
        );
        worst = worst.max(relative_error(&analytic, fd.data()));
    }
    Ok(worst)
}

fn gradients() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = primitive_cases(&mut rng);
    let mut worst_prim: f64 = 0.0;
    for (i, (name, build, inputs)) in cases.iter().enumerate() {
        let e = primitive_error(build.as_ref(), inputs, 100 + i as u64);
        ensure!(e <= 1e-6, "primitive {name}: relative error {e:e}");
        worst_prim = worst_prim.max(e);
    }

    let s = small();
    let mut cfg = s.cfg.clone();
    cfg.tasks = Task::ALL.to_vec();
    let sp = ok(split(s.data.len(), cfg.split, 3))?;
    let mut members = Vec::new();
    for task in Task::ALL {
        let n = s.data.n_experts();
        let mut m = ok(init_model(&s.data, &sp, task, &[0, 1, 2], MixerInit::Fixed(vec![1.0 / n as f64; n]), &cfg, 3))?;
        perturb_b(&mut m, &mut rng);
        members.push(m);
    }
    let total: usize = members.iter().map(EnEcgModel::out_dim).sum();
    let mut gate = ok(GatingNetwork::new(cfg.gate.clone(), 3, total, &mut rng))?;
    perturb(gate.layers.iter_mut().map(|l| &mut l.b).collect(), &mut rng);
    let jm = ok(JointModel::new(members, gate))?;
    let e2e = joint_loss_error(&jm, &s.data, &sp.train[..2])?;
    ensure!(e2e <= 1e-4, "end-to-end relative error {e2e:e}");
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!(
        "{} primitives max rel err {worst_prim:.1e}; all-task loss {e2e:.1e}; {secs:.1}s",
        cases.len()
    ))
}

// ---------------------------------------------------------------- 2

/// `W0·x + bias` through every layer, ReLU between layers.
fn frozen_mlp(layers: &[LoraLinear], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (j, layer) in layers.iter().enumerate() {
        let (d, k) = (layer.w0.shape()[0], layer.w0.shape()[1]);
        let w = layer.w0.data();
        let mut y: Vec<f64> = (0..d)
            .map(|i| (0..k).map(|c| w[i * k + c] * h[c]).sum::<f64>() + layer.bias.data()[i])
            .collect();
        if j + 1 < layers.len() {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = y;
    }
    h
}

/// Scalar-loop forward of a gated model using only frozen weights.
fn frozen_forward(m: &EnEcgModel, data: &PreparedDataset, i: usize) -> Vec<f64> {
    let (n, l) = (m.n_experts(), m.out_dim());
    let logits: Vec<Vec<f64>> = m
        .experts
        .iter()
        .zip(&m.scalers)
        .zip(&m.heads)
        .map(|((&e, sc), head)| {
            let z: Vec<f64> = data
                .feature_row(e, i)
                .iter()
                .enumerate()
                .map(|(c, v)| (v + sc.shift.data()[c]) * sc.inv_scale.data()[c])
                .collect();
            frozen_mlp(&head.layers, &z)
        })
        .collect();
    let g = m.gate().expect("gated model");
    let k = if g.config.per_coordinate { l } else { 1 };
    let scores = frozen_mlp(&g.layers, data.gate_row(i));
    (0..l)
        .map(|c| {
            let col: Vec<f64> = (0..n).map(|e| scores[e * k + c.min(k - 1)]).collect();
            let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = col.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            (0..n).map(|e| ex[e] / z * logits[e][c]).sum()
        })
        .collect()
}

fn lora_identity() -> Check {
    let s = small();
    let sp = ok(split(s.data.len(), s.cfg.split, 5))?;
    let mut worst: f64 = 0.0;
    for task in Task::ALL {
        let m = ok(init_model(&s.data, &sp, task, &[0, 1, 2], MixerInit::Gate(s.cfg.gate.clone()), &s.cfg, 5))?;
        let got = ok(m.predict_logits(&s.data, &sp.test, Exec::Parallel))?;
        let l = m.out_dim();
        for (si, &i) in sp.test.iter().enumerate() {
            for (c, want) in frozen_forward(&m, &s.data, i).into_iter().enumerate() {
                let d = (got[si * l + c] - want).abs();
                worst = worst.max(d);
                ensure!(d <= 1e-12, "{task} record {i} coord {c}: {} vs frozen {want}", got[si * l + c]);
            }
        }
    }

    let mut cfg = s.cfg.clone();
    cfg.epochs = 30;
    let experts_before: Vec<String> = s.roster.iter().map(ExpertModel::checksum).collect();
    let mut m = ok(init_model(&s.data, &sp, Task::Arrhythmia, &[0, 1, 2], MixerInit::Gate(cfg.gate.clone()), &cfg, 6))?;
    let w0_before = m.frozen_checksum();
    let trained_before: Vec<Vec<f64>> = m.trainable().iter().map(|t| t.data().to_vec()).collect();
    let log = ok(fit(&mut m, &s.data, &sp.train, &sp.val, &TrainOptions::from_config(&cfg, 6), cfg.exec))?;
    ensure!(log.val_loss.len() == 31, "expected 30 epochs, log has {}", log.val_loss.len() - 1);
    ensure!(m.frozen_checksum() == w0_before, "W0 checksum changed during training");
    let experts_after: Vec<String> = s.roster.iter().map(ExpertModel::checksum).collect();
    ensure!(experts_after == experts_before, "expert checksum changed during training");
    ensure!(
        s.data.feature_dims.len() == s.roster.len(),
        "prepared features do not match the roster"
    );
    ensure!(
        m.trainable().iter().zip(&trained_before).any(|(t, b)| t.data() != &b[..]),
        "training left every LoRA factor unchanged"
    );
    Ok(format!("init max |Δ| {worst:.1e}; W0 and expert checksums stable over 30 epochs"))
}

// ---------------------------------------------------------------- 3

fn lora_counts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (d, k, r) in [(64, 64, 4), (64, 250, 4), (5, 64, 4), (1, 64, 1), (12, 7, 3)] {
        let layer = ok(LoraLinear::new(d, k, r, true, false, &mut rng))?;
        ensure!(layer.trainable_count() == r * (d + k) + d, "{d}x{k} r{r}: {}", layer.trainable_count());
        let no_bias = ok(LoraLinear::new(d, k, r, false, false, &mut rng))?;
        ensure!(no_bias.trainable_count() == r * (d + k), "{d}x{k} r{r} without bias");
        ensure!(layer.full_count() == d * k + d, "{d}x{k} full count");
    }
    let lora = lora_param_count(64, 64, 4, true);
    let full = 64 * 64 + 64;
    ensure!(lora == 576 && full == 4160, "64x64 r4: {lora}/{full}");
    let ratio = lora as f64 / full as f64;
    ensure!((ratio - 0.138).abs() < 5e-4, "ratio {ratio}");

    // Bench counts of a default-sized model against dimension arithmetic.
    let cfg = ExperimentConfig::default();
    let roster: Vec<ExpertModel> = ok(cfg.experts.iter().cloned().map(ExpertModel::build).collect::<Result<Vec<_>, _>>())?;
    let mut gcfg = cfg.data.clone();
    gcfg.n_records = 4;
    let records = ok(gcfg.generate(Exec::Parallel))?;
    let data = ok(prepare_records(&records, &roster, &cfg.gate, Exec::Parallel))?;
    let sp = enecg::pipeline::Split {
        train: vec![0, 1],
        val: vec![2],
        test: vec![3],
    };
    let raw: Vec<EcgRecord> = records.iter().map(|r| r.0.clone()).collect();
    let h = cfg.head.hidden;
    let rank = |d: usize, k: usize| cfg.head.rank.min(d).min(k);
    for task in Task::ALL {
        let l = task.out_dim();
        let m = ok(init_model(&data, &sp, task, &[0, 1, 2], MixerInit::Gate(cfg.gate.clone()), &cfg, 0))?;
        let eff = ok(bench(&m, &roster, &raw, Exec::Parallel, 3))?;
        let mut trainable = 0;
        let mut full_ffn = 0;
        for &fd in &data.feature_dims {
            trainable += rank(h, fd) * (h + fd) + h + rank(l, h) * (l + h) + l;
            full_ffn += h * fd + h + l * h + l;
        }
        let gin = cfg.gate.input_dim();
        let gh = cfg.gate.hidden;
        let gout = 3 * l;
        let grank = |d: usize, k: usize| cfg.gate.rank.min(d).min(k);
        trainable += grank(gh, gin) * (gh + gin) + gh + grank(gout, gh) * (gout + gh) + gout;
        full_ffn += gh * gin + gh + gout * gh + gout;
        let experts: usize = roster.iter().map(ExpertModel::param_count).sum();
        ensure!(eff.params_trainable == trainable, "{task}: bench {} vs {trainable}", eff.params_trainable);
        ensure!(eff.params_full_ffn == full_ffn, "{task}: full {} vs {full_ffn}", eff.params_full_ffn);
        ensure!(eff.params_expert == experts, "{task}: expert params");
        ensure!(eff.params_total == eff.params_trainable + eff.params_frozen, "{task}: total");
    }
    Ok(format!("64x64 r4: {lora}/{full} = {ratio:.4}; bench counts match for 5 tasks"))
}

// ---------------------------------------------------------------- 4

fn gate_normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for per_coordinate in [true, false] {
        let cfg = GateConfig {
            per_coordinate,
            ..GateConfig::default()
        };
        let mut g = ok(GatingNetwork::new(cfg, 3, 4, &mut rng))?;
        perturb(g.layers.iter_mut().map(|l| &mut l.b).collect(), &mut rng);
        for _ in 0..1000 {
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            let x: Vec<f64> = (0..g.input_dim()).map(|_| rng.random_range(-scale..scale)).collect();
            let w = ok(g.weights(&x))?;
            let (n, l) = (w.shape()[0], w.shape()[1]);
            for c in 0..l {
                let col: Vec<f64> = (0..n).map(|e| w.data()[e * l + c]).collect();
                ensure!(col.iter().all(|&v| v >= 0.0 && v.is_finite()), "negative weight {col:?}");
                let sum: f64 = col.iter().sum();
                ensure!((sum - 1.0).abs() <= 1e-9, "column sums to {sum}");
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} columns over 2000 inputs"))
}

// ---------------------------------------------------------------- 5

fn ensemble_mechanics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, n, l) = (7, 3, 4);
    let logits = Tensor::uniform(&[b, n, l], 5.0, &mut rng);
    let lv = logits.data().to_vec();
    for e in 0..n {
        let w: Vec<f64> = (0..b * n * l).map(|i| if (i / l) % n == e { 1.0 } else { 0.0 }).collect();
        let mut tape = Tape::new();
        let lz = tape.leaf(&logits);
        let wz = ok(tape.constant(&[b, n, l], w))?;
        let out = ok(ensemble_combine(&mut tape, lz, wz))?;
        let got = tape.value(out);
        for s in 0..b {
            for c in 0..l {
                let want = lv[(s * n + e) * l + c];
                ensure!((got[s * l + c] - want).abs() <= 1e-12, "one-hot e{e} s{s} c{c}");
            }
        }
    }
    let mut tape = Tape::new();
    let lz = tape.leaf(&logits);
    let wz = ok(tape.constant(&[b, n, l], vec![1.0 / n as f64; b * n * l]))?;
    let out = ok(ensemble_combine(&mut tape, lz, wz))?;
    let got = tape.value(out).to_vec();
    for s in 0..b {
        for c in 0..l {
            let mut mean = 0.0;
            for e in 0..n {
                mean += lv[(s * n + e) * l + c];
            }
            mean /= n as f64;
            ensure!((got[s * l + c] - mean).abs() <= 1e-12, "uniform s{s} c{c}: {} vs {mean}", got[s * l + c]);
        }
        let single = ok(Tensor::new(&[n, l], lv[s * n * l..(s + 1) * n * l].to_vec()))?;
        let uni = ok(Tensor::new(&[n, l], vec![1.0 / n as f64; n * l]))?;
        let c1 = ok(combine(&single, &uni))?;
        ensure!(c1.data().iter().zip(&got[s * l..(s + 1) * l]).all(|(a, b)| (a - b).abs() <= 1e-12), "combine");
    }

    // The same through full models built from fine-tuned single heads.
    let s = small();
    let sp = ok(split(s.data.len(), s.cfg.split, 9))?;
    let mut cfg = s.cfg.clone();
    cfg.epochs = 1;
    let singles: Vec<EnEcgModel> = ok(train_singles(&s.data, &sp, Task::Arrhythmia, &cfg, 9))?.into_iter().map(|(m, _)| m).collect();
    let per: Vec<Vec<f64>> = singles
        .iter()
        .map(|m| m.predict_logits(&s.data, &sp.test, Exec::Parallel))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for e in 0..n {
        let mut w = vec![0.0; n];
        w[e] = 1.0;
        let m = ok(assemble(&singles, Mixer::Fixed(w)))?;
        let got = ok(m.predict_logits(&s.data, &sp.test, Exec::Parallel))?;
        ensure!(got.iter().zip(&per[e]).all(|(a, b)| (a - b).abs() <= 1e-12), "one-hot model e{e}");
    }
    let m = ok(assemble(&singles, Mixer::Fixed(vec![1.0 / n as f64; n])))?;
    let got = ok(m.predict_logits(&s.data, &sp.test, Exec::Parallel))?;
    for (i, g) in got.iter().enumerate() {
        let mean = (0..n).map(|e| per[e][i]).sum::<f64>() / n as f64;
        ensure!((g - mean).abs() <= 1e-12, "uniform model entry {i}: {g} vs {mean}");
    }
    Ok("one-hot and uniform match scalar loops on tensors and models".into())
}

// ---------------------------------------------------------------- 6

fn moe_mean(run: &TaskRun) -> Result<f64, String> {
    let v = run.strategy_values(Strategy::Moe).ok_or("moe missing")?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn ensemble_advantage() -> Check {
    let s = suite()?;
    ensure!(s.cfg.data.n_records == 10_000 && s.cfg.repeats == 3, "suite is not the default 10k x 3");
    ensure!(s.cfg.split == [0.7, 0.2, 0.1], "split {:?}", s.cfg.split);
    let sums: Vec<String> = s.roster.iter().map(ExpertModel::checksum).collect();
    ensure!(sums == s.expert_sums_before, "expert parameters changed during the suite");
    let mut wins = 0;
    let mut best_ids = Vec::new();
    let mut lines = Vec::new();
    for run in &s.runs {
        let metric = run.task.metric();
        let (best, st) = run.best_single().ok_or("no singles")?;
        let moe = moe_mean(run)?;
        let within = match run.task.kind() {
            TaskKind::Regression => moe <= 1.05 * st.mean,
            _ => moe >= 0.95 * st.mean,
        };
        ensure!(within, "{}: moe {moe:.4} vs best single {:.4} ({})", run.task, st.mean, s.cfg.experts[best].name);
        if metric.better(moe, st.mean) {
            wins += 1;
        }
        best_ids.push(best);
        lines.push(format!("{} {moe:.3}/{:.3}", run.task, st.mean));
    }
    ensure!(wins >= 3, "moe better on only {wins} of 5 tasks: {}", lines.join(", "));
    best_ids.sort();
    best_ids.dedup();
    ensure!(best_ids.len() >= 2, "the same expert is best on every task");
    ensure!(s.seconds < 900.0, "suite took {:.0}s", s.seconds);
    Ok(format!(
        "wins {wins}/5 [{}]; {} distinct best singles; {:.0}s",
        lines.join(", "),
        best_ids.len(),
        s.seconds
    ))
}

// ---------------------------------------------------------------- 7

fn f1(pred: &[bool], truth: &[bool]) -> f64 {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as f64;
    let fn_ = pred.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as f64;
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

fn oracle_learnability() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_records = 2000;
    cfg.data.noise_mv = 0.0;
    cfg.data.baseline_wander_mv = 0.0;
    cfg.tasks = vec![Task::Rr];
    cfg.repeats = 1;
    let roster: Vec<ExpertModel> = ok(cfg.experts.iter().cloned().map(ExpertModel::build).collect::<Result<Vec<_>, _>>())?;
    let data = ok(prepare_generated(&cfg.data, &roster, &cfg.gate, cfg.exec))?;
    let run = ok(run_repeat(&data, Task::Rr, &cfg, 0, &[Strategy::Moe]))?;
    let (_, eval) = run.strategies[0].outcome.as_ref().map_err(Clone::clone)?;
    let train = data.targets(Task::Rr, &run.split.train);
    let mean = train.iter().sum::<f64>() / train.len() as f64;
    let test = data.targets(Task::Rr, &run.split.test);
    let const_mae = test.iter().map(|t| (t - mean).abs()).sum::<f64>() / test.len() as f64;
    ensure!(eval.value <= 0.5 * const_mae, "rr mae {:.2} vs constant {const_mae:.2}", eval.value);

    let s = suite()?;
    let pot = s.runs.iter().find(|r| r.task == Task::Potassium).ok_or("no potassium run")?;
    let mut f1s = Vec::new();
    for rep in &pot.repeats {
        let truth: Vec<bool> = s.data.targets(Task::Potassium, &rep.split.test).iter().map(|&t| t > 0.5).collect();
        let prevalence = truth.iter().filter(|&&t| t).count() as f64 / truth.len() as f64;
        ensure!(prevalence < 0.1, "potassium prevalence {prevalence}");
        let baseline = f1(&vec![false; truth.len()], &truth);
        let (_, e) = rep
            .strategies
            .iter()
            .find(|x| x.strategy == Strategy::Moe)
            .and_then(|x| x.outcome.as_ref().ok())
            .ok_or("moe missing")?;
        ensure!(e.value > baseline, "potassium f1 {} not above all-negative {baseline}", e.value);
        f1s.push(e.value);
    }
    Ok(format!(
        "noiseless rr mae {:.2} vs constant {const_mae:.2}; potassium f1 {:?} > 0",
        eval.value,
        f1s.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
    ))
}

// ---------------------------------------------------------------- 8

fn strategy_comparison() -> Check {
    let s = suite()?;
    let names: Vec<String> = s.cfg.experts.iter().map(|e| e.name.clone()).collect();
    let report = comparison_report(&s.runs, &COMPARISON_COLUMNS, &names);
    ensure!(report.columns.len() == 4, "{} columns", report.columns.len());
    ensure!(report.rows.len() == 5, "{} rows", report.rows.len());
    let table = report.to_table();
    for row in &report.rows {
        let regression = row.task.kind() == TaskKind::Regression;
        for (col, cell) in report.columns.iter().zip(&row.cells) {
            let expect_missing = regression && *col == Strategy::ZeroShot;
            ensure!(cell.is_none() == expect_missing, "{} {col}: cell {:?}", row.task, cell.as_ref().map(|c| c.mean));
        }
        let line = table
            .lines()
            .find(|l| l.split_whitespace().next() == Some(row.task.to_string().as_str()))
            .ok_or(format!("table has no {} row", row.task))?;
        ensure!(line.contains(NOT_APPLICABLE) == regression, "{} row: {line}", row.task);
    }
    let mut stds = Vec::new();
    for task in [Task::Rr, Task::Age] {
        let moe = report.cell(task, Strategy::Moe).ok_or("moe cell")?;
        let greedy = report.cell(task, Strategy::Greedy).ok_or("greedy cell")?;
        ensure!(moe.values.len() == 3, "{task}: {} seeds", moe.values.len());
        ensure!(moe.std <= greedy.std, "{task}: moe std {:.4} > greedy std {:.4}", moe.std, greedy.std);
        stds.push(format!("{task} {:.3}<={:.3}", moe.std, greedy.std));
    }
    Ok(format!("4 strategies x 5 tasks; zero-shot n/a on rr, age; std {}", stds.join(", ")))
}

// ---------------------------------------------------------------- 9

fn completeness() -> Check {
    let s = suite()?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    // The full rr ensemble, as the saliency command is used in practice.
    let run = s.runs.iter().find(|r| r.task == Task::Rr).ok_or("rr run missing")?;
    let rep = &run.repeats[0];
    let (model, _) = rep
        .strategies
        .iter()
        .find(|x| x.strategy == Strategy::Moe)
        .and_then(|x| x.outcome.as_ref().ok())
        .ok_or("moe missing")?;
    for _ in 0..20 {
        let i = rep.split.test[rng.random_range(0..rep.split.test.len())];
        let (rec, _) = ok(s.cfg.data.generate_record(i))?;
        let coord = rng.random_range(0..model.out_dim());
        let map = ok(model_saliency(model, &s.roster, &rec.leads, SaliencyTarget::Combined { coord }, 256, s.cfg.exec))?;
        let rel = map.relative_gap();
        ensure!(rel <= 0.01, "{} record {i}: gap {:.3e} is {:.2}% of |ΔF|", run.task, map.completeness_gap, 100.0 * rel);
        worst = worst.max(rel);
    }

    let (c, t) = (12, 64);
    let w = Tensor::uniform(&[c, t], 2.0, &mut rng);
    let x = Tensor::uniform(&[c, t], 1.0, &mut rng);
    let base = Tensor::uniform(&[c, t], 0.5, &mut rng);
    let wv = w.clone();
    let linear = move |tape: &mut Tape, v: Var| {
        let wz = tape.leaf(&wv);
        let p = tape.mul(v, wz)?;
        let s = tape.sum(p)?;
        let b = tape.constant(&[1], vec![0.75])?;
        tape.add(s, b)
    };
    let map = ok(integrated_gradients(linear, &x, &base, 1, Exec::Sequential))?;
    ensure!(map.completeness_gap <= 1e-10, "linear gap {:e}", map.completeness_gap);
    for j in 0..c * t {
        let want = w.data()[j] * (x.data()[j] - base.data()[j]);
        ensure!(close(map.attributions.data()[j], want, 1e-10), "linear attribution {j}");
    }
    Ok(format!(
        "20 records, worst gap {:.3}% of |ΔF| at m=256; linear m=1 gap {:.1e}",
        100.0 * worst,
        map.completeness_gap
    ))
}

// ---------------------------------------------------------------- 10

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for e in ok(fs::read_dir(dir))? {
        let p = ok(e)?.path();
        out.push((p.file_name().unwrap().to_string_lossy().into_owned(), ok(fs::read(&p))?));
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Check {
    let tmp = ok(tempfile::tempdir())?;
    let s = small();
    let mut g = s.cfg.data.clone();
    g.n_records = 30;
    ok(save_generated(tmp.path().join("a"), &g, 7, Exec::Parallel))?;
    ok(save_generated(tmp.path().join("b"), &g, 7, Exec::Sequential))?;
    let a = dir_bytes(&tmp.path().join("a"))?;
    ensure!(a.len() == 6, "{} files", a.len());
    ensure!(a == dir_bytes(&tmp.path().join("b"))?, "equal seeds produced different dataset files");
    g.seed += 1;
    ok(save_generated(tmp.path().join("c"), &g, 7, Exec::Parallel))?;
    ensure!(a != dir_bytes(&tmp.path().join("c"))?, "different seeds produced identical files");

    let mut cfg = s.cfg.clone();
    cfg.tasks = vec![Task::Rr, Task::Sex];
    cfg.repeats = 2;
    cfg.epochs = 2;
    let report = |exec| -> Result<enecg::pipeline::MetricsReport, String> {
        let mut cfg = cfg.clone();
        cfg.exec = exec;
        let runs = ok(run_suite(&s.data, &cfg, &[Strategy::Moe]))?;
        ok(metrics_report(&runs, Strategy::Moe, &s.data, &s.roster, &cfg))
    };
    let r1 = report(Exec::Parallel)?;
    let r2 = report(Exec::Sequential)?;
    ensure!(r1.same_results(&r2), "metrics differ between identical runs");
    let back = ok(enecg::pipeline::MetricsReport::from_json(&r1.to_json()))?;
    ensure!(back.same_results(&r1), "metrics json round trip");

    let path = tmp.path().join("records.enecg");
    ok(save_records(&path, &s.records))?;
    let loaded = ok(load_records(&path))?;
    ensure!(loaded == s.records, "record file round trip is not value-exact");

    let sp = ok(split(s.data.len(), cfg.split, 10))?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (task, mixer) in [
        (Task::Arrhythmia, MixerInit::Gate(cfg.gate.clone())),
        (Task::Age, MixerInit::Fixed(vec![0.2, 0.5, 0.3])),
    ] {
        let mut m = ok(init_model(&s.data, &sp, task, &[0, 1, 2], mixer, &cfg, 10))?;
        perturb_b(&mut m, &mut rng);
        let ck_path = tmp.path().join(format!("{task}.ckpt"));
        ok(m.to_checkpoint().save(&ck_path))?;
        let back = ok(EnEcgModel::from_checkpoint(&ok(Checkpoint::load(&ck_path))?))?;
        ensure!(back.to_checkpoint().to_text() == m.to_checkpoint().to_text(), "{task}: checkpoint text differs");
        let (p, q) = (
            ok(m.predict_logits(&s.data, &sp.test, Exec::Parallel))?,
            ok(back.predict_logits(&s.data, &sp.test, Exec::Parallel))?,
        );
        ensure!(p == q, "{task}: predictions differ after checkpoint round trip");
    }
    Ok("dataset bytes, metrics, records and checkpoints reproduce exactly".into())
}

// ---------------------------------------------------------------- driver

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient suite", gradients),
        ("lora identity and frozen contract", lora_identity),
        ("lora parameter accounting", lora_counts),
        ("gating normalization", gate_normalization),
        ("ensemble mechanics", ensemble_mechanics),
        ("ensemble advantage", ensemble_advantage),
        ("oracle learnability", oracle_learnability),
        ("strategy comparison", strategy_comparison),
        ("integrated-gradients completeness", completeness),
        ("determinism and formats", determinism),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
