//! Named-tensor checkpoint file.
//!
//! ```text
//! ENECG-CKPT 1
//! meta <key> <value>
//! tensor <name> <d0>x<d1>...
//! <comma-separated row-major values>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::adapters::lora::LoraLinear;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const HEADER: &str = "ENECG-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), t.clone());
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::usage(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::usage(format!("checkpoint has no meta key {key:?}")))
    }

    /// Copies `name` into `dst`, checking the shape.
    pub fn restore(&self, name: &str, dst: &mut Tensor) -> Result<()> {
        let src = self.tensor(name)?;
        if src.shape() != dst.shape() {
            return Err(Error::dim(format!(
                "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.assign(src.data())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            writeln!(s, "meta {k} {v}").unwrap();
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(s, "tensor {name} {}", dims.join("x")).unwrap();
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v}")).collect();
            writeln!(s, "{}", vals.join(",")).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, head) = lines.next().ok_or_else(|| Error::parse(1, "empty checkpoint"))?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some(HEADER) {
            return Err(Error::parse(1, format!("missing `{HEADER}` header")));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(1, "missing checkpoint version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(1, format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::new();
        while let Some((n, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let mut f = line.splitn(3, ' ');
            match (f.next(), f.next(), f.next()) {
                (Some("meta"), Some(k), Some(v)) => {
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                (Some("tensor"), Some(name), Some(dims)) => {
                    let shape = dims
                        .split('x')
                        .map(|d| d.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::parse(n, format!("bad shape {dims:?}")))?;
                    let (vn, vals) = lines
                        .next()
                        .ok_or_else(|| Error::parse(n, format!("tensor {name} has no value line")))?;
                    let data = vals
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::parse(vn, format!("unreadable value in tensor {name}")))?;
                    let t = Tensor::new(&shape, data).map_err(|e| Error::parse(vn, e.to_string()))?;
                    ck.tensors.insert(name.to_string(), t);
                }
                _ => return Err(Error::parse(n, format!("unrecognized line {line:?}"))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl LoraLinear {
    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        for (name, t) in self.tensors() {
            ck.insert(format!("{prefix}.{name}"), t);
        }
        ck.set_meta(format!("{prefix}.rank"), self.rank());
    }

    pub fn read_checkpoint(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let rank: usize = ck
            .meta_value(&format!("{prefix}.rank"))?
            .parse()
            .map_err(|_| Error::usage(format!("{prefix}.rank is not an integer")))?;
        if rank != self.rank() {
            return Err(Error::dim(format!(
                "{prefix}: checkpoint rank {rank} differs from model rank {}",
                self.rank()
            )));
        }
        for (name, t) in self.tensors_mut() {
            ck.restore(&format!("{prefix}.{name}"), t)?;
        }
        Ok(())
    }
}
