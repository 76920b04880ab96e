//! Integrated-gradients attribution over model inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertModel;
use crate::numerics::{Tape, Tensor, Var};
use crate::par::{try_map_range, Exec};
use crate::pipeline::EnEcgModel;

#[derive(Debug, Clone)]
pub struct SaliencyMap {
    /// Same shape as the attributed input.
    pub attributions: Tensor,
    pub baseline: String,
    pub steps: usize,
    pub f_input: f64,
    pub f_baseline: f64,
    /// `|Σ attributions − (F(x) − F(x′))|`.
    pub completeness_gap: f64,
    pub target: String,
}

impl SaliencyMap {
    /// Gap divided by `|F(x) − F(x′)|`.
    pub fn relative_gap(&self) -> f64 {
        self.completeness_gap / (self.f_input - self.f_baseline).abs()
    }
}

/// `F(p)` and `∂F/∂p` at one point.
fn value_and_grad<F>(f: &F, shape: &[usize], point: Vec<f64>) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.variable(shape, point)?;
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::usage(format!(
            "attribution target must be a single value, got shape {:?}",
            tape.shape(y)
        )));
    }
    let value = tape.value(y)[0];
    let grads = tape.backward(y)?;
    let g = grads
        .wrt(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; tape.value(x).len()]);
    Ok((value, g))
}

/// Midpoint-rule integrated gradients of the scalar `f` along the straight
/// path from `baseline` to `x` with `steps` evaluations.
pub fn integrated_gradients<F>(f: F, x: &Tensor, baseline: &Tensor, steps: usize, exec: Exec) -> Result<SaliencyMap>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    if steps == 0 {
        return Err(Error::usage("integrated gradients needs at least one step"));
    }
    if x.shape() != baseline.shape() {
        return Err(Error::dim(format!(
            "baseline shape {:?} differs from input shape {:?}",
            baseline.shape(),
            x.shape()
        )));
    }
    let shape = x.shape();
    let (xv, bv) = (x.data(), baseline.data());
    let per_step = try_map_range(exec, steps, |t| {
        let alpha = (t as f64 + 0.5) / steps as f64;
        let point = bv.iter().zip(xv).map(|(b, x)| b + alpha * (x - b)).collect();
        value_and_grad(&f, shape, point).map(|(_, g)| g)
    })?;
    let mut avg = vec![0.0; xv.len()];
    for g in &per_step {
        avg.iter_mut().zip(g).for_each(|(a, gi)| *a += gi);
    }
    let attributions: Vec<f64> = avg
        .iter()
        .zip(xv.iter().zip(bv))
        .map(|(g, (x, b))| (x - b) * g / steps as f64)
        .collect();
    let f_input = value_and_grad(&f, shape, xv.to_vec())?.0;
    let f_baseline = value_and_grad(&f, shape, bv.to_vec())?.0;
    let total: f64 = attributions.iter().sum();
    Ok(SaliencyMap {
        attributions: Tensor::new(shape, attributions)?,
        baseline: "custom".into(),
        steps,
        f_input,
        f_baseline,
        completeness_gap: (total - (f_input - f_baseline)).abs(),
        target: String::new(),
    })
}

/// Which scalar of an ensemble model is attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SaliencyTarget {
    /// Coordinate of the combined ensemble logit.
    Combined { coord: usize },
    /// Coordinate of one expert's own logit, before weighting.
    Expert { expert: usize, coord: usize },
}

impl SaliencyTarget {
    pub fn describe(&self) -> String {
        match self {
            SaliencyTarget::Combined { coord } => format!("combined[{coord}]"),
            SaliencyTarget::Expert { expert, coord } => format!("expert{expert}[{coord}]"),
        }
    }
}

/// Integrated gradients of an ensemble output with respect to the raw
/// record `[C, T]`, from an all-zero baseline.
pub fn model_saliency(
    model: &EnEcgModel,
    roster: &[ExpertModel],
    leads: &Tensor,
    target: SaliencyTarget,
    steps: usize,
    exec: Exec,
) -> Result<SaliencyMap> {
    let l = model.out_dim();
    let n = model.n_experts();
    let (row, coord) = match target {
        SaliencyTarget::Combined { coord } => (None, coord),
        SaliencyTarget::Expert { expert, coord } => (Some(expert), coord),
    };
    if coord >= l || row.is_some_and(|e| e >= n) {
        return Err(Error::usage(format!(
            "saliency target {} out of range for {n} experts and {l} outputs",
            target.describe()
        )));
    }
    let f = |tape: &mut Tape, x: Var| -> Result<Var> {
        let out = model.forward_record(tape, roster, x)?;
        match row {
            None => tape.slice(out.combined, 1, coord, coord + 1),
            Some(e) => {
                let v = tape.reshape(out.logits, &[n, l])?;
                let v = tape.slice(v, 0, e, e + 1)?;
                tape.slice(v, 1, coord, coord + 1)
            }
        }
    };
    let baseline = Tensor::zeros(leads.shape());
    let mut map = integrated_gradients(f, leads, &baseline, steps, exec)?;
    map.baseline = "zeros".into();
    map.target = target.describe();
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    baseline: String,
    steps: usize,
    completeness_gap: f64,
    f_input: f64,
    f_baseline: f64,
    target: String,
    shape: Vec<usize>,
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes `lead,sample_index,attribution` rows to `path` and the run
/// settings to a `.json` file next to it.
pub fn export_saliency(map: &SaliencyMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let shape = map.attributions.shape();
    let (c, t) = match shape {
        [t] => (1, *t),
        [c, t] => (*c, *t),
        other => return Err(Error::dim(format!("attribution shape {other:?} is not [C, T]"))),
    };
    let mut s = String::from("lead,sample_index,attribution\n");
    let a = map.attributions.data();
    for lead in 0..c {
        for i in 0..t {
            writeln!(s, "{lead},{i},{}", a[lead * t + i]).unwrap();
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        baseline: map.baseline.clone(),
        steps: map.steps,
        completeness_gap: map.completeness_gap,
        f_input: map.f_input,
        f_baseline: map.f_baseline,
        target: map.target.clone(),
        shape: vec![c, t],
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&side).expect("sidecar serializes")).map_err(|e| Error::io(&sp, e))
}

/// Reads back a map written by [`export_saliency`].
pub fn load_saliency(path: impl AsRef<Path>) -> Result<SaliencyMap> {
    let path = path.as_ref();
    let sp = sidecar_path(path);
    let side_text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&side_text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (c, t) = match side.shape[..] {
        [c, t] => (c, t),
        _ => return Err(Error::parse(1, "sidecar shape must have two entries")),
    };
    let mut data = vec![f64::NAN; c * t];
    let mut rows = 0;
    for (n, line) in text.lines().enumerate().skip(1) {
        let ln = n + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::parse(ln, "expected lead,sample_index,attribution"));
        }
        let lead: usize = f[0].parse().map_err(|_| Error::parse(ln, "bad lead"))?;
        let i: usize = f[1].parse().map_err(|_| Error::parse(ln, "bad sample index"))?;
        let v: f64 = f[2].parse().map_err(|_| Error::parse(ln, "bad attribution"))?;
        if lead >= c || i >= t {
            return Err(Error::parse(ln, format!("cell ({lead}, {i}) outside shape [{c}, {t}]")));
        }
        data[lead * t + i] = v;
        rows += 1;
    }
    if rows != c * t {
        return Err(Error::parse(text.lines().count(), format!("expected {} rows, found {rows}", c * t)));
    }
    Ok(SaliencyMap {
        attributions: Tensor::new(&[c, t], data)?,
        baseline: side.baseline,
        steps: side.steps,
        f_input: side.f_input,
        f_baseline: side.f_baseline,
        completeness_gap: side.completeness_gap,
        target: side.target,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn linear(w: Vec<f64>) -> impl Fn(&mut Tape, Var) -> Result<Var> + Sync {
        move |tape: &mut Tape, x: Var| {
            let wv = tape.constant(&[w.len()], w.clone())?;
            let p = tape.mul(x, wv)?;
            tape.sum(p)
        }
    }

    /// `Σ sin(xᵢ)·xᵢ`, smooth and nonlinear.
    fn smooth(tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.mul(x, x)?;
        let s = tape.scale(s, 0.3)?;
        let sq = tape.mul(s, x)?;
        let r = tape.relu(x)?;
        let z = tape.add(sq, r)?;
        tape.sum(z)
    }

    #[test]
    fn input_equal_to_baseline_gives_zero() {
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]).unwrap();
        let map = integrated_gradients(smooth, &x, &x, 16, Exec::Sequential).unwrap();
        assert!(map.attributions.data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn linear_models_are_exact_for_one_step() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..8).map(|_| r.random_range(-2.0..2.0)).collect();
        let x = Tensor::uniform(&[8], 3.0, &mut r);
        let b = Tensor::uniform(&[8], 1.0, &mut r);
        for m in [1, 7] {
            let map = integrated_gradients(linear(w.clone()), &x, &b, m, Exec::Parallel).unwrap();
            for i in 0..8 {
                let expect = w[i] * (x.data()[i] - b.data()[i]);
                assert!((map.attributions.data()[i] - expect).abs() <= 1e-12);
            }
            assert!(map.completeness_gap <= 1e-10);
        }
    }

    #[test]
    fn gap_shrinks_with_more_steps() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut wins = 0;
        for _ in 0..20 {
            let x = Tensor::uniform(&[2, 6], 2.0, &mut r);
            let base = Tensor::zeros(&[2, 6]);
            let coarse = integrated_gradients(smooth, &x, &base, 32, Exec::Parallel).unwrap();
            let fine = integrated_gradients(smooth, &x, &base, 512, Exec::Parallel).unwrap();
            if fine.completeness_gap <= coarse.completeness_gap {
                wins += 1;
            }
        }
        assert!(wins >= 18, "{wins}/20");
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = Tensor::zeros(&[3]);
        assert!(matches!(
            integrated_gradients(smooth, &x, &x, 0, Exec::Sequential),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            integrated_gradients(smooth, &x, &Tensor::zeros(&[4]), 4, Exec::Sequential),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 5], 2.0, &mut r);
        let b = Tensor::zeros(&[3, 5]);
        let a = integrated_gradients(smooth, &x, &b, 40, Exec::Parallel).unwrap();
        let s = integrated_gradients(smooth, &x, &b, 40, Exec::Sequential).unwrap();
        assert_eq!(a.attributions.data(), s.attributions.data());
        assert_eq!(a.completeness_gap, s.completeness_gap);
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[3, 7], 2.0, &mut r);
        let mut map = integrated_gradients(smooth, &x, &Tensor::zeros(&[3, 7]), 8, Exec::Sequential).unwrap();
        map.target = "combined[0]".into();
        let path = dir.path().join("sal.csv");
        export_saliency(&map, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 21);
        let back = load_saliency(&path).unwrap();
        assert_eq!(back.attributions.data(), map.attributions.data());
        assert_eq!(back.attributions.shape(), map.attributions.shape());
        assert_eq!(
            (back.f_input, back.f_baseline, back.completeness_gap, back.steps),
            (map.f_input, map.f_baseline, map.completeness_gap, map.steps)
        );
        assert_eq!((&back.target[..], &back.baseline[..]), ("combined[0]", "custom"));
        assert!(back.completeness_gap.is_finite());
        let bad = dir.path().join("missing").join("x.csv");
        assert!(matches!(export_saliency(&map, bad), Err(Error::Io { .. })));
    }
}
