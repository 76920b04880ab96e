use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One multi-lead recording, `leads` shaped `[C, T]` in millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub leads: Tensor,
    pub sampling_rate_hz: f64,
}

/// Oracle targets for the five downstream tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub rr_ms: f64,
    pub age_years: f64,
    pub sex: u8,
    pub potassium_abnormal: u8,
    pub arrhythmia_class: u8,
}

impl EcgRecord {
    pub fn new(record_id: impl Into<String>, leads: Tensor, sampling_rate_hz: f64) -> Result<Self> {
        let shape = leads.shape();
        if shape.len() != 2 || shape[1] < 2 {
            return Err(Error::dim(format!(
                "record leads must be [C, T] with T >= 2, got {shape:?}"
            )));
        }
        if !(sampling_rate_hz.is_finite() && sampling_rate_hz > 0.0) {
            return Err(Error::usage(format!("sampling rate must be positive, got {sampling_rate_hz}")));
        }
        Ok(Self {
            record_id: record_id.into(),
            leads,
            sampling_rate_hz,
        })
    }

    pub fn n_leads(&self) -> usize {
        self.leads.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.leads.shape()[1]
    }

    pub fn lead(&self, i: usize) -> &[f64] {
        let t = self.n_samples();
        &self.leads.data()[i * t..(i + 1) * t]
    }
}

/// Mean-pools each row of a `[C, T]` tensor to exactly `target_len` samples
/// using windows of `floor(T / target_len)`; samples past the last full
/// window are dropped.
pub fn downsample_tensor(x: &Tensor, target_len: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!("downsample expects [C, T], got {shape:?}")));
    }
    let (c, t) = (shape[0], shape[1]);
    if target_len == 0 {
        return Err(Error::usage("downsample: target length must be positive"));
    }
    if target_len > t {
        return Err(Error::dim(format!(
            "downsample: target length {target_len} exceeds signal length {t}"
        )));
    }
    let window = t / target_len;
    let mut out = Vec::with_capacity(c * target_len);
    for row in x.data().chunks_exact(t) {
        for w in row[..window * target_len].chunks_exact(window) {
            out.push(w.iter().sum::<f64>() / window as f64);
        }
    }
    Tensor::new(&[c, target_len], out)
}

pub fn downsample(x: &EcgRecord, target_len: usize) -> Result<Tensor> {
    downsample_tensor(&x.leads, target_len)
}

/// Row-selected copy of the record in the order given.
pub fn leads_sample(x: &EcgRecord, indices: &[usize]) -> Result<Tensor> {
    select_rows(&x.leads, indices)
}

pub(crate) fn select_rows(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (c, t) = (x.shape()[0], x.shape()[1]);
    if indices.is_empty() {
        return Err(Error::usage("leads_sample: no lead indices given"));
    }
    for (i, &idx) in indices.iter().enumerate() {
        if idx >= c {
            return Err(Error::dim(format!("lead index {idx} out of range for {c} leads")));
        }
        if indices[..i].contains(&idx) {
            return Err(Error::usage(format!("lead index {idx} given twice")));
        }
    }
    let mut out = Vec::with_capacity(indices.len() * t);
    for &idx in indices {
        out.extend_from_slice(&x.data()[idx * t..(idx + 1) * t]);
    }
    Tensor::new(&[indices.len(), t], out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ramp(c: usize, t: usize) -> EcgRecord {
        let data = (0..c * t).map(|i| (i as f64 * 0.37).sin()).collect();
        EcgRecord::new("r", Tensor::new(&[c, t], data).unwrap(), 500.0).unwrap()
    }

    #[test]
    fn downsample_shapes_and_identity() {
        let r = ramp(12, 5000);
        let d = downsample(&r, 500).unwrap();
        assert_eq!(d.shape(), &[12, 500]);
        assert_eq!(downsample(&r, 5000).unwrap(), r.leads);
        let d = downsample(&r, 512).unwrap();
        assert_eq!(d.shape(), &[12, 512]);
        // window 9: first output is the mean of the first nine samples.
        let expect: f64 = r.lead(0)[..9].iter().sum::<f64>() / 9.0;
        assert!((d.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn downsample_constant_and_errors() {
        let c = EcgRecord::new("c", Tensor::filled(&[2, 100], 0.7), 500.0).unwrap();
        assert!(downsample(&c, 7).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(matches!(downsample(&c, 101), Err(Error::Dimension(_))));
        assert!(matches!(downsample(&c, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn lead_selection() {
        let r = ramp(12, 50);
        let all: Vec<usize> = (0..12).collect();
        assert_eq!(leads_sample(&r, &all).unwrap(), r.leads);
        let one = leads_sample(&r, &[1]).unwrap();
        assert_eq!(one.shape(), &[1, 50]);
        assert_eq!(one.data(), r.lead(1));
        let two = leads_sample(&r, &[3, 1]).unwrap();
        assert_eq!(&two.data()[..50], r.lead(3));
        assert_eq!(&two.data()[50..], r.lead(1));
        assert!(matches!(leads_sample(&r, &[12]), Err(Error::Dimension(_))));
        assert!(matches!(leads_sample(&r, &[]), Err(Error::Usage(_))));
        assert!(matches!(leads_sample(&r, &[2, 2]), Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn downsample_commutes_with_lead_selection(
            t in 2usize..300,
            frac in 0.01f64..1.0,
            picks in prop::collection::btree_set(0usize..12, 1..6),
        ) {
            let r = ramp(12, t);
            let target = ((t as f64 * frac) as usize).max(1);
            let idx: Vec<usize> = picks.into_iter().collect();
            let a = select_rows(&downsample(&r, target).unwrap(), &idx).unwrap();
            let b = downsample_tensor(&leads_sample(&r, &idx).unwrap(), target).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
