//! Frozen surrogate feature extractors.
//!
//! Three architectures look at the signal differently: a spectral expert
//! sees per-lead DFT magnitudes, a convolutional expert sees local
//! morphology through two random filter banks, and a statistical expert
//! sees per-patch mean/std/min/max. All weights are drawn once from a seed
//! and never trained.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{checksum_all, Tape, Tensor, Var};

pub const SPECTRAL_BINS: usize = 64;
pub const STAT_PATCHES: usize = 32;
const CONV_CHANNELS: usize = 16;
const CONV1_WIDTH: usize = 7;
const CONV2_WIDTH: usize = 5;
const CONV_POOLED: usize = 8;
const STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Spectral,
    Convolutional,
    Statistical,
}

impl Architecture {
    pub fn default_input_len(self) -> usize {
        match self {
            Architecture::Spectral => 512,
            Architecture::Convolutional => 1000,
            Architecture::Statistical => 2500,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Spectral => "spectral",
            Architecture::Convolutional => "convolutional",
            Architecture::Statistical => "statistical",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "spectral" => Ok(Architecture::Spectral),
            "convolutional" | "conv" => Ok(Architecture::Convolutional),
            "statistical" | "stat" => Ok(Architecture::Statistical),
            other => Err(Error::usage(format!(
                "unknown expert architecture {other:?} (expected spectral, convolutional or statistical)"
            ))),
        }
    }
}

/// Roster entry describing one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub name: String,
    pub arch: Architecture,
    pub seed: u64,
    pub input_len: usize,
    pub feature_dim: usize,
    pub n_leads: usize,
}

impl ExpertSpec {
    pub fn new(name: impl Into<String>, arch: Architecture, seed: u64) -> Self {
        Self {
            name: name.into(),
            arch,
            seed,
            input_len: arch.default_input_len(),
            feature_dim: 64,
            n_leads: 12,
        }
    }

    /// The default three-expert roster, one per architecture.
    pub fn default_roster() -> Vec<ExpertSpec> {
        vec![
            ExpertSpec::new("spectral", Architecture::Spectral, 101),
            ExpertSpec::new("convolutional", Architecture::Convolutional, 202),
            ExpertSpec::new("statistical", Architecture::Statistical, 303),
        ]
    }
}

/// A frozen feature extractor.
#[derive(Debug, Clone)]
pub struct ExpertModel {
    pub spec: ExpertSpec,
    params: Vec<Tensor>,
}

fn frozen_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl ExpertModel {
    pub fn build(spec: ExpertSpec) -> Result<Self> {
        if spec.input_len == 0 || spec.feature_dim == 0 || spec.n_leads == 0 {
            return Err(Error::usage(format!(
                "expert {}: input_len, feature_dim and n_leads must be positive",
                spec.name
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (c, len, fd) = (spec.n_leads, spec.input_len, spec.feature_dim);
        let params = match spec.arch {
            Architecture::Spectral => {
                if len < SPECTRAL_BINS {
                    return Err(Error::usage(format!(
                        "spectral expert needs input_len >= {SPECTRAL_BINS}"
                    )));
                }
                let inp = c * SPECTRAL_BINS;
                vec![frozen_uniform(&[inp, fd], inp, &mut rng), frozen_uniform(&[fd], inp, &mut rng)]
            }
            Architecture::Convolutional => {
                let t2 = conv_len(spec.input_len)?;
                if t2 < CONV_POOLED {
                    return Err(Error::usage("convolutional expert input too short"));
                }
                let inp = CONV_CHANNELS * CONV_POOLED;
                vec![
                    frozen_uniform(&[CONV_CHANNELS, c, CONV1_WIDTH], c * CONV1_WIDTH, &mut rng),
                    frozen_uniform(&[CONV_CHANNELS, CONV_CHANNELS, CONV2_WIDTH], CONV_CHANNELS * CONV2_WIDTH, &mut rng),
                    frozen_uniform(&[inp, fd], inp, &mut rng),
                    frozen_uniform(&[fd], inp, &mut rng),
                ]
            }
            Architecture::Statistical => {
                if len < STAT_PATCHES {
                    return Err(Error::usage(format!(
                        "statistical expert needs input_len >= {STAT_PATCHES}"
                    )));
                }
                let inp = c * STAT_PATCHES * 4;
                vec![frozen_uniform(&[inp, fd], inp, &mut rng), frozen_uniform(&[fd], inp, &mut rng)]
            }
        };
        Ok(Self { spec, params })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn required_input_len(&self) -> usize {
        self.spec.input_len
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn checksum(&self) -> String {
        checksum_all(&self.params)
    }

    /// Records the forward pass of `x: [C, input_len]` on `tape`, returning
    /// a `[1, feature_dim]` node.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (c, len) = (self.spec.n_leads, self.spec.input_len);
        let shape = tape.shape(x).to_vec();
        if shape != [c, len] {
            return Err(Error::dim(format!(
                "expert {} expects input [{c}, {len}] (input length {len}), got {shape:?}",
                self.spec.name
            )));
        }
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t)).collect();
        let flat = match self.spec.arch {
            Architecture::Spectral => {
                let mag = tape.dft_magnitude(x, SPECTRAL_BINS)?;
                let mag = tape.scale(mag, 1.0 / len as f64)?;
                tape.reshape(mag, &[1, c * SPECTRAL_BINS])?
            }
            Architecture::Convolutional => {
                let h = tape.conv1d(x, p[0], 2)?;
                let h = tape.relu(h)?;
                let h = tape.conv1d(h, p[1], 2)?;
                let h = tape.relu(h)?;
                let t2 = tape.shape(h)[1];
                let window = t2 / CONV_POOLED;
                let h = tape.slice(h, 1, 0, window * CONV_POOLED)?;
                let h = tape.mean_pool(h, window)?;
                tape.reshape(h, &[1, CONV_CHANNELS * CONV_POOLED])?
            }
            Architecture::Statistical => {
                let window = len / STAT_PATCHES;
                let x = tape.slice(x, 1, 0, window * STAT_PATCHES)?;
                let mean = tape.mean_pool(x, window)?;
                let sq = tape.mul(x, x)?;
                let mean_sq = tape.mean_pool(sq, window)?;
                let m2 = tape.mul(mean, mean)?;
                let var = tape.sub(mean_sq, m2)?;
                let eps = tape.constant(&[1], vec![STD_EPS])?;
                let var = tape.add(var, eps)?;
                let std = tape.sqrt(var)?;
                let max = tape.max_pool(x, window)?;
                let neg = tape.scale(x, -1.0)?;
                let neg_min = tape.max_pool(neg, window)?;
                let min = tape.scale(neg_min, -1.0)?;
                let stats = tape.concat(&[mean, std, min, max], 1)?;
                tape.reshape(stats, &[1, c * STAT_PATCHES * 4])?
            }
        };
        let (w, b) = match self.spec.arch {
            Architecture::Convolutional => (p[2], p[3]),
            _ => (p[0], p[1]),
        };
        let proj = tape.matmul(flat, w)?;
        tape.add(proj, b)
    }

    /// Features for one already-downsampled input.
    pub fn features(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let out = self.forward(&mut tape, v)?;
        Ok(tape.value(out).to_vec())
    }
}

fn conv_len(len: usize) -> Result<usize> {
    if len < CONV1_WIDTH {
        return Err(Error::usage("convolutional expert input too short"));
    }
    let t1 = (len - CONV1_WIDTH) / 2 + 1;
    if t1 < CONV2_WIDTH {
        return Err(Error::usage("convolutional expert input too short"));
    }
    Ok((t1 - CONV2_WIDTH) / 2 + 1)
}

/// Builds an expert from its architecture tag.
pub fn build_expert(tag: &str, seed: u64, required_input_len: usize, feature_dim: usize) -> Result<ExpertModel> {
    let arch: Architecture = tag.parse()?;
    ExpertModel::build(ExpertSpec {
        name: tag.to_string(),
        arch,
        seed,
        input_len: required_input_len,
        feature_dim,
        n_leads: 12,
    })
}

/// Frozen per-feature standardization fitted on training features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub shift: Tensor,
    pub inv_scale: Tensor,
}

impl FeatureScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: Tensor::zeros(&[dim]),
            inv_scale: Tensor::filled(&[dim], 1.0),
        }
    }

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for r in rows {
            if sum.is_empty() {
                sum = vec![0.0; r.len()];
                sq = vec![0.0; r.len()];
            } else if r.len() != sum.len() {
                return Err(Error::dim("feature rows differ in length"));
            }
            for (i, v) in r.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::usage("cannot fit a scaler on zero rows"));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let inv: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / nf - m * m).max(0.0);
                1.0 / var.sqrt().max(1e-8)
            })
            .collect();
        Ok(Self {
            shift: Tensor::vector(mean.iter().map(|m| -m).collect())?,
            inv_scale: Tensor::vector(inv)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// `(x + shift) · inv_scale` on rows of `x: [batch, dim]`.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.leaf(&self.shift);
        let k = tape.leaf(&self.inv_scale);
        let centred = tape.add(x, s)?;
        tape.mul(centred, k)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn sinusoid(c: usize, len: usize, cycles: f64) -> Tensor {
        let data = (0..c * len)
            .map(|i| (std::f64::consts::TAU * cycles * (i % len) as f64 / len as f64).sin())
            .collect();
        Tensor::new(&[c, len], data).unwrap()
    }

    #[test]
    fn builds_are_deterministic_and_frozen() {
        for tag in ["spectral", "convolutional", "statistical"] {
            let a = build_expert(tag, 7, Architecture::from_str(tag).unwrap().default_input_len(), 64).unwrap();
            let b = build_expert(tag, 7, a.required_input_len(), 64).unwrap();
            assert_eq!(a.checksum(), b.checksum());
            assert!(a.params().iter().all(|p| !p.requires_grad()));
        }
        assert!(matches!(build_expert("transformer", 1, 10, 4), Err(Error::Usage(_))));
    }

    #[test]
    fn output_has_feature_dim() {
        for spec in ExpertSpec::default_roster() {
            let m = ExpertModel::build(spec).unwrap();
            let x = sinusoid(12, m.required_input_len(), 3.0);
            assert_eq!(m.features(&x).unwrap().len(), 64);
            assert_eq!(m.features(&x).unwrap(), m.features(&x).unwrap());
        }
    }

    #[test]
    fn wrong_length_names_expected() {
        let m = build_expert("spectral", 1, 512, 64).unwrap();
        match m.features(&Tensor::zeros(&[12, 500])) {
            Err(Error::Dimension(msg)) => assert!(msg.contains("512"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spectral_zero_input_gives_bias() {
        let m = build_expert("spectral", 3, 512, 64).unwrap();
        let f = m.features(&Tensor::zeros(&[12, 512])).unwrap();
        assert_eq!(f, m.params()[1].data());
    }

    #[test]
    fn spectral_separates_frequencies() {
        // 512 samples over 10 s: 5 Hz is 50 cycles, 20 Hz is 200 cycles.
        let m = build_expert("spectral", 3, 512, 64).unwrap();
        let a = m.features(&sinusoid(12, 512, 50.0)).unwrap();
        let b = m.features(&sinusoid(12, 512, 200.0)).unwrap();
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.0);
        // 20 Hz lies beyond the 64 kept bins (6.4 Hz), so only the bias remains.
        for (v, bias) in b.iter().zip(m.params()[1].data()) {
            assert!((v - bias).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let small = |arch: Architecture, len: usize| {
            ExpertModel::build(ExpertSpec {
                name: arch.tag().into(),
                arch,
                seed: 11,
                input_len: len,
                feature_dim: 8,
                n_leads: 2,
            })
            .unwrap()
        };
        for (m, len) in [
            (small(Architecture::Spectral, 64), 64),
            (small(Architecture::Convolutional, 60), 60),
            (small(Architecture::Statistical, 64), 64),
        ] {
            let x = Tensor::uniform(&[2, len], 1.0, &mut rng);
            let w: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |t: &Tensor| -> f64 { m.features(t).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum() };
            let mut tape = Tape::new();
            let v = tape.variable(x.shape(), x.data().to_vec()).unwrap();
            let out = m.forward(&mut tape, v).unwrap();
            let wv = tape.constant(&[8], w.clone()).unwrap();
            let prod = tape.mul(out, wv).unwrap();
            let s = tape.sum(prod).unwrap();
            let g = tape.backward(s).unwrap();
            let fd = finite_diff_grad(f, &x, 1e-6);
            let err = relative_error(g.wrt(v).unwrap(), fd.data());
            assert!(err <= 1e-5, "{}: rel err {err:e}", m.name());
        }
    }

    #[test]
    fn scaler_standardizes() {
        let rows = [vec![1.0, 10.0], vec![3.0, 10.0]];
        let s = FeatureScaler::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 2], vec![1.0, 10.0, 3.0, 10.0]).unwrap();
        let y = s.apply(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &[-1.0, 0.0, 1.0, 0.0]);
    }
}
