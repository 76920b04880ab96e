//! Gaussian P-QRS-T beat trains mixed into leads through fixed lead vectors.
//!
//! Labels are oracle-exact functions of the generative parameters:
//! `rr_ms = 60000 / heart_rate`, age is affine in the T-wave offset (a QT-like
//! interval), sex selects the P-wave amplitude regime, abnormal potassium
//! scales the T wave, and the arrhythmia class picks a beat pattern.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par::{map_range, Exec};
use crate::signal::record::{EcgRecord, LabelSet};
use crate::signal::ARRHYTHMIA_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveShape {
    /// Peak height in millivolts along the wave's own axis.
    pub amplitude: f64,
    /// Centre relative to the R peak, seconds.
    pub offset_s: f64,
    /// Gaussian standard deviation, seconds.
    pub width_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waves {
    pub p: WaveShape,
    pub q: WaveShape,
    pub r: WaveShape,
    pub s: WaveShape,
    /// `offset_s` is ignored; the T offset is the per-record QT-like interval.
    pub t: WaveShape,
}

/// How one arrhythmia class deforms the sinus beat train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatPattern {
    pub name: String,
    /// Relative standard deviation of beat-to-beat intervals.
    pub rr_irregularity: f64,
    /// Probability that a beat has no P wave.
    pub p_drop: f64,
    /// Multiplier on Q, R and S widths.
    pub qrs_widen: f64,
    /// Extra PR delay, seconds.
    pub pr_extra_s: f64,
    pub t_invert: bool,
    pub r_scale: f64,
    /// Every n-th beat arrives 30% early with a compensatory pause; 0 = never.
    pub premature_every: usize,
    /// Height of an ST-segment hump, millivolts.
    pub st_elevation: f64,
}

impl BeatPattern {
    fn sinus(name: &str) -> Self {
        Self {
            name: name.to_string(),
            rr_irregularity: 0.0,
            p_drop: 0.0,
            qrs_widen: 1.0,
            pr_extra_s: 0.0,
            t_invert: false,
            r_scale: 1.0,
            premature_every: 0,
            st_elevation: 0.0,
        }
    }

    /// The fifteen default patterns; class 0 is regular sinus rhythm.
    pub fn defaults() -> Vec<BeatPattern> {
        let s = Self::sinus;
        vec![
            s("sinus"),
            BeatPattern { rr_irregularity: 0.08, ..s("sinus_arrhythmia") },
            BeatPattern { rr_irregularity: 0.2, p_drop: 1.0, ..s("atrial_fibrillation") },
            BeatPattern { pr_extra_s: 0.12, ..s("first_degree_block") },
            BeatPattern { p_drop: 0.35, ..s("dropped_p") },
            BeatPattern { qrs_widen: 2.2, ..s("lbbb") },
            BeatPattern { qrs_widen: 1.7, r_scale: 0.7, ..s("rbbb") },
            BeatPattern { premature_every: 2, ..s("bigeminy") },
            BeatPattern { premature_every: 3, ..s("trigeminy") },
            BeatPattern { t_invert: true, ..s("t_inversion") },
            BeatPattern { r_scale: 0.5, ..s("low_voltage") },
            BeatPattern { r_scale: 1.8, ..s("lvh") },
            BeatPattern { st_elevation: 0.2, ..s("st_elevation") },
            BeatPattern { p_drop: 1.0, ..s("junctional") },
            BeatPattern { rr_irregularity: 0.05, qrs_widen: 1.4, t_invert: true, ..s("other") },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_records: usize,
    pub duration_s: f64,
    pub sampling_rate_hz: f64,
    /// Inclusive heart-rate range in beats per minute.
    pub heart_rate_bpm: (f64, f64),
    pub waves: Waves,
    /// Range of the QT-like interval (T-wave offset), seconds.
    pub qt_range_s: (f64, f64),
    /// `age = intercept + slope·(qt − qt_min) + U(−noise, noise)`, clamped to [0, 110].
    pub age_intercept: f64,
    pub age_slope_per_s: f64,
    pub age_noise: f64,
    /// P amplitude for sex 0 and sex 1.
    pub p_amplitude_by_sex: (f64, f64),
    pub sex_prevalence: f64,
    pub potassium_prevalence: f64,
    pub potassium_t_factor: f64,
    pub arrhythmia_prevalence: Vec<f64>,
    pub patterns: Vec<BeatPattern>,
    /// Lead vectors, one 3-D direction per lead (`n_leads × 3`).
    pub lead_vectors: Vec<[f64; 3]>,
    /// Cardiac axis of P, Q, R, S and T.
    pub wave_axes: [[f64; 3]; 5],
    /// White-noise standard deviation, millivolts.
    pub noise_mv: f64,
    /// Amplitude of a slow baseline sinusoid, millivolts.
    pub baseline_wander_mv: f64,
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Frontal-plane limb leads then horizontal-plane precordial leads.
fn default_lead_vectors() -> Vec<[f64; 3]> {
    let frontal = [0.0f64, 60.0, 120.0, -150.0, -30.0, 90.0];
    let precordial = [-60.0f64, -30.0, 0.0, 20.0, 40.0, 60.0];
    let mut v: Vec<[f64; 3]> = frontal
        .iter()
        .map(|a| {
            let r = a.to_radians();
            [r.cos(), r.sin(), 0.0]
        })
        .collect();
    v.extend(precordial.iter().map(|a| {
        let r = a.to_radians();
        unit([r.sin(), 0.3, -r.cos()])
    }));
    v
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let mut prevalence = vec![0.05; ARRHYTHMIA_CLASSES];
        prevalence[0] = 0.30;
        Self {
            seed: 0,
            n_records: 10_000,
            duration_s: 10.0,
            sampling_rate_hz: 500.0,
            heart_rate_bpm: (45.0, 120.0),
            waves: Waves {
                p: WaveShape { amplitude: 0.15, offset_s: -0.17, width_s: 0.022 },
                q: WaveShape { amplitude: -0.12, offset_s: -0.028, width_s: 0.009 },
                r: WaveShape { amplitude: 1.1, offset_s: 0.0, width_s: 0.011 },
                s: WaveShape { amplitude: -0.25, offset_s: 0.03, width_s: 0.01 },
                t: WaveShape { amplitude: 0.3, offset_s: 0.3, width_s: 0.045 },
            },
            qt_range_s: (0.22, 0.38),
            age_intercept: 20.0,
            age_slope_per_s: 70.0 / 0.16,
            age_noise: 3.0,
            p_amplitude_by_sex: (0.2, 0.09),
            sex_prevalence: 0.5,
            potassium_prevalence: 0.03,
            potassium_t_factor: 2.0,
            arrhythmia_prevalence: prevalence,
            patterns: BeatPattern::defaults(),
            lead_vectors: default_lead_vectors(),
            wave_axes: [
                unit([0.5, 0.8, 0.2]),
                unit([-0.6, 0.3, 0.5]),
                unit([0.55, 0.8, -0.25]),
                unit([-0.2, -0.5, 0.8]),
                unit([0.5, 0.7, -0.4]),
            ],
            noise_mv: 0.02,
            baseline_wander_mv: 0.05,
        }
    }
}

struct RecordParams {
    labels: LabelSet,
    p_amp: f64,
    t_amp: f64,
    qt_s: f64,
    phase_s: f64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.heart_rate_bpm;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::usage(format!("heart_rate range must be positive and ordered, got ({lo}, {hi})")));
        }
        let (qlo, qhi) = self.qt_range_s;
        if !(qlo > 0.0 && qhi >= qlo) {
            return Err(Error::usage("qt range must be positive and ordered"));
        }
        for (name, p) in [
            ("sex_prevalence", self.sex_prevalence),
            ("potassium_prevalence", self.potassium_prevalence),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::usage(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.arrhythmia_prevalence.len() != ARRHYTHMIA_CLASSES
            || self.patterns.len() != ARRHYTHMIA_CLASSES
        {
            return Err(Error::usage(format!(
                "need {ARRHYTHMIA_CLASSES} arrhythmia prevalences and patterns"
            )));
        }
        if self.arrhythmia_prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::usage("arrhythmia prevalences must lie in [0, 1]"));
        }
        let total: f64 = self.arrhythmia_prevalence.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::usage(format!("arrhythmia prevalences sum to {total}, not 1")));
        }
        if self.lead_vectors.is_empty() {
            return Err(Error::usage("at least one lead is required"));
        }
        if self.n_samples() < 2 || self.sampling_rate_hz <= 0.0 {
            return Err(Error::usage("record must span at least two samples"));
        }
        if self.noise_mv < 0.0 || self.baseline_wander_mv < 0.0 {
            return Err(Error::usage("noise amplitudes must be nonnegative"));
        }
        Ok(())
    }

    pub fn n_leads(&self) -> usize {
        self.lead_vectors.len()
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sampling_rate_hz).round() as usize
    }

    fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    fn draw_params(&self, rng: &mut ChaCha8Rng) -> RecordParams {
        let hr = rng.random_range(self.heart_rate_bpm.0..=self.heart_rate_bpm.1);
        let qt = rng.random_range(self.qt_range_s.0..=self.qt_range_s.1);
        let age_noise = if self.age_noise > 0.0 {
            rng.random_range(-self.age_noise..=self.age_noise)
        } else {
            0.0
        };
        let age = (self.age_intercept + self.age_slope_per_s * (qt - self.qt_range_s.0) + age_noise)
            .clamp(0.0, 110.0);
        let sex = u8::from(rng.random_bool(self.sex_prevalence));
        let potassium = u8::from(rng.random_bool(self.potassium_prevalence));
        let u: f64 = rng.random();
        let mut class = ARRHYTHMIA_CLASSES - 1;
        let mut cum = 0.0;
        for (c, p) in self.arrhythmia_prevalence.iter().enumerate() {
            cum += p;
            if u < cum {
                class = c;
                break;
            }
        }
        let p_amp = if sex == 1 {
            self.p_amplitude_by_sex.1
        } else {
            self.p_amplitude_by_sex.0
        } * rng.random_range(0.9..=1.1);
        let mut t_amp = self.waves.t.amplitude * rng.random_range(0.9..=1.1);
        if potassium == 1 {
            t_amp *= self.potassium_t_factor;
        }
        let rr_s = 60.0 / hr;
        // Phase on the sample grid so noiseless peaks are exactly periodic.
        let phase_samples = rng.random_range(0.0..rr_s) * self.sampling_rate_hz;
        RecordParams {
            labels: LabelSet {
                rr_ms: 60_000.0 / hr,
                age_years: age,
                sex,
                potassium_abnormal: potassium,
                arrhythmia_class: class as u8,
            },
            p_amp,
            t_amp,
            qt_s: qt,
            phase_s: phase_samples.floor() / self.sampling_rate_hz,
        }
    }

    /// Record `index` of the dataset; independent of every other index.
    pub fn generate_record(&self, index: usize) -> Result<(EcgRecord, LabelSet)> {
        if index >= self.n_records {
            return Err(Error::usage(format!(
                "record index {index} out of range for {} records",
                self.n_records
            )));
        }
        let mut rng = self.rng_for(index);
        let params = self.draw_params(&mut rng);
        let pattern = &self.patterns[params.labels.arrhythmia_class as usize];
        let fs = self.sampling_rate_hz;
        let n = self.n_samples();
        let rr_s = params.labels.rr_ms / 1000.0;

        // Beat times: one beat before the window so the start is not empty.
        let mut beats = Vec::new();
        let mut t = params.phase_s - rr_s;
        let mut k = 0usize;
        let end = self.duration_s + 0.6;
        while t < end {
            beats.push(t);
            let mut interval = rr_s;
            if pattern.rr_irregularity > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                interval *= (1.0 + pattern.rr_irregularity * z).clamp(0.6, 1.4);
            }
            if pattern.premature_every > 0 {
                let pos = k % pattern.premature_every;
                if pos == pattern.premature_every - 1 {
                    interval *= 0.7;
                } else if pos == 0 && k > 0 {
                    interval *= 1.3;
                }
            }
            t += interval;
            k += 1;
        }

        let w = &self.waves;
        let qrs = pattern.qrs_widen;
        let t_sign = if pattern.t_invert { -1.0 } else { 1.0 };
        // (amplitude, offset, width) per wave index P,Q,R,S,T plus ST hump on the T axis.
        let mut components: [Vec<f64>; 5] = Default::default();
        for c in components.iter_mut() {
            *c = vec![0.0; n];
        }
        for &tb in &beats {
            let drop_p = pattern.p_drop > 0.0 && rng.random_bool(pattern.p_drop.min(1.0));
            let specs: [(usize, f64, f64, f64); 6] = [
                (0, if drop_p { 0.0 } else { params.p_amp }, w.p.offset_s - pattern.pr_extra_s, w.p.width_s),
                (1, w.q.amplitude, w.q.offset_s * qrs, w.q.width_s * qrs),
                (2, w.r.amplitude * pattern.r_scale, w.r.offset_s, w.r.width_s * qrs),
                (3, w.s.amplitude, w.s.offset_s * qrs, w.s.width_s * qrs),
                (4, t_sign * params.t_amp, params.qt_s, w.t.width_s),
                (4, pattern.st_elevation, 0.45 * params.qt_s, 0.05),
            ];
            for (wave, amp, offset, width) in specs {
                if amp == 0.0 {
                    continue;
                }
                add_gaussian(&mut components[wave], fs, tb + offset, width, amp);
            }
        }

        let gains: Vec<[f64; 5]> = self
            .lead_vectors
            .iter()
            .map(|lv| {
                let mut g = [0.0; 5];
                for (gi, axis) in g.iter_mut().zip(&self.wave_axes) {
                    *gi = lv[0] * axis[0] + lv[1] * axis[1] + lv[2] * axis[2];
                }
                g
            })
            .collect();
        let wander_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let wander_hz = rng.random_range(0.15..0.4);
        let mut data = Vec::with_capacity(gains.len() * n);
        for g in &gains {
            for i in 0..n {
                let mut v = 0.0;
                for (wave, comp) in components.iter().enumerate() {
                    v += g[wave] * comp[i];
                }
                if self.baseline_wander_mv > 0.0 {
                    let tt = i as f64 / fs;
                    v += self.baseline_wander_mv * (std::f64::consts::TAU * wander_hz * tt + wander_phase).sin();
                }
                if self.noise_mv > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v += self.noise_mv * z;
                }
                data.push(v);
            }
        }
        let leads = Tensor::new(&[gains.len(), n], data)?;
        let record = EcgRecord::new(format!("rec{:06}", index), leads, fs)?;
        Ok((record, params.labels))
    }

    /// Labels only, without synthesizing samples.
    pub fn labels(&self, index: usize) -> LabelSet {
        let mut rng = self.rng_for(index);
        self.draw_params(&mut rng).labels
    }

    /// Every record of the dataset, in index order.
    pub fn generate(&self, exec: Exec) -> Result<Vec<(EcgRecord, LabelSet)>> {
        self.generate_map(exec, |_, rec, labels| Ok((rec, labels)))
    }

    /// Generates each record and immediately maps it, so raw samples never
    /// have to be held for the whole dataset.
    pub fn generate_map<T, F>(&self, exec: Exec, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, EcgRecord, LabelSet) -> Result<T> + Sync + Send,
    {
        self.validate()?;
        map_range(exec, self.n_records, |i| {
            let (rec, labels) = self.generate_record(i)?;
            f(i, rec, labels)
        })
        .into_iter()
        .collect()
    }
}

fn add_gaussian(out: &mut [f64], fs: f64, center_s: f64, width_s: f64, amp: f64) {
    let c = center_s * fs;
    let sd = width_s * fs;
    let reach = (5.0 * sd).ceil();
    let lo = (c - reach).floor().max(0.0) as usize;
    let hi = ((c + reach).ceil().max(0.0) as usize).min(out.len());
    let inv = 1.0 / (2.0 * sd * sd);
    for (i, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
        let d = i as f64 - c;
        *o += amp * (-d * d * inv).exp();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig { n_records: n, ..Default::default() }
    }

    /// Independent threshold detector: local maxima of lead II above half the
    /// global maximum, at least 200 ms apart.
    fn r_peaks(lead: &[f64], fs: f64) -> Vec<usize> {
        let max = lead.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let thr = 0.5 * max;
        let refractory = (0.2 * fs) as usize;
        let mut peaks: Vec<usize> = Vec::new();
        for i in 1..lead.len() - 1 {
            if lead[i] > thr && lead[i] >= lead[i - 1] && lead[i] > lead[i + 1] {
                if let Some(&last) = peaks.last() {
                    if i - last < refractory {
                        if lead[i] > lead[last] {
                            *peaks.last_mut().unwrap() = i;
                        }
                        continue;
                    }
                }
                peaks.push(i);
            }
        }
        peaks
    }

    fn noiseless_sinus(hr: (f64, f64)) -> GeneratorConfig {
        let mut prevalence = vec![0.0; ARRHYTHMIA_CLASSES];
        prevalence[0] = 1.0;
        GeneratorConfig {
            n_records: 20,
            heart_rate_bpm: hr,
            noise_mv: 0.0,
            baseline_wander_mv: 0.0,
            arrhythmia_prevalence: prevalence,
            ..Default::default()
        }
    }

    #[test]
    fn sixty_bpm_gives_one_second_rr() {
        let cfg = noiseless_sinus((60.0, 60.0));
        let (rec, labels) = cfg.generate_record(0).unwrap();
        assert_eq!(labels.rr_ms, 1000.0);
        let peaks = r_peaks(rec.lead(crate::signal::LEAD_II), rec.sampling_rate_hz);
        assert!(peaks.len() >= 9);
        for w in peaks.windows(2) {
            assert_eq!(w[1] - w[0], 500);
        }
    }

    #[test]
    fn noiseless_rr_recovered_within_one_sample() {
        let cfg = noiseless_sinus((45.0, 120.0));
        for i in 0..cfg.n_records {
            let (rec, labels) = cfg.generate_record(i).unwrap();
            let fs = rec.sampling_rate_hz;
            let peaks = r_peaks(rec.lead(crate::signal::LEAD_II), fs);
            assert!(peaks.len() >= 2, "record {i}");
            let expected = labels.rr_ms / 1000.0 * fs;
            for w in peaks.windows(2) {
                let d = (w[1] - w[0]) as f64;
                assert!((d - expected).abs() <= 1.0, "record {i}: {d} vs {expected}");
            }
        }
    }

    #[test]
    fn generation_is_pure_in_seed() {
        let cfg = small(3);
        let a = cfg.generate(Exec::Sequential).unwrap();
        let b = cfg.generate(Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let other = GeneratorConfig { seed: 1, ..small(3) };
        assert_ne!(a[0].0.leads, other.generate_record(0).unwrap().0.leads);
        assert_eq!(cfg.labels(2), a[2].1);
    }

    #[test]
    fn default_shape_and_label_ranges() {
        let cfg = small(4);
        let (rec, _) = cfg.generate_record(0).unwrap();
        assert_eq!(rec.leads.shape(), &[12, 5000]);
        for i in 0..200 {
            let l = GeneratorConfig { n_records: 200, ..Default::default() }.labels(i);
            assert!((500.0..=1334.0).contains(&l.rr_ms));
            assert!((0.0..=110.0).contains(&l.age_years));
            assert!((l.arrhythmia_class as usize) < ARRHYTHMIA_CLASSES);
        }
    }

    #[test]
    fn prevalences_within_binomial_bounds() {
        let cfg = GeneratorConfig { n_records: 10_000, ..Default::default() };
        let n = cfg.n_records as f64;
        let labels: Vec<LabelSet> = (0..cfg.n_records).map(|i| cfg.labels(i)).collect();
        let k = labels.iter().filter(|l| l.potassium_abnormal == 1).count() as f64 / n;
        assert!((k - 0.03).abs() <= 0.005, "potassium prevalence {k}");
        let within = |p: f64, obs: f64| (obs - p).abs() <= 3.0 * (p * (1.0 - p) / n).sqrt();
        let sex = labels.iter().filter(|l| l.sex == 1).count() as f64 / n;
        assert!(within(0.5, sex), "sex {sex}");
        for c in 0..ARRHYTHMIA_CLASSES {
            let obs = labels.iter().filter(|l| l.arrhythmia_class as usize == c).count() as f64 / n;
            assert!(within(cfg.arrhythmia_prevalence[c], obs), "class {c}: {obs}");
        }
    }

    #[test]
    fn potassium_doubles_t_wave() {
        let mut cfg = noiseless_sinus((60.0, 60.0));
        cfg.potassium_prevalence = 1.0;
        let (hi, lh) = cfg.generate_record(0).unwrap();
        cfg.potassium_prevalence = 0.0;
        let (lo, ll) = cfg.generate_record(0).unwrap();
        assert_eq!(lh.potassium_abnormal, 1);
        assert_eq!(ll.potassium_abnormal, 0);
        assert_ne!(hi.leads, lo.leads);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = GeneratorConfig { heart_rate_bpm: (90.0, 60.0), ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Usage(_))));
        let bad = GeneratorConfig { potassium_prevalence: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(small(2).generate_record(2).is_err());
    }
}
