//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends one node holding its output value. Nodes are
//! stored in creation order, which is a topological order, so `backward`
//! is a single reverse sweep. Parameters enter the tape as leaves tagged
//! with their [`TensorId`]; after the sweep their gradients are summed per
//! id and can be deposited into the owning tensors.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::tensor::{check_shape, Tensor, TensorId};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    Softmax { x: usize, axis: usize },
    Conv1d { x: usize, k: usize, stride: usize },
    MeanPool { x: usize, window: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    DftMag { x: usize, bins: usize },
    Slice { x: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Reshape(usize),
    BceLogits { z: usize, targets: Vec<f64>, weights: Vec<f64> },
    CrossEntropy { z: usize, classes: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::Conv1d { .. } => "conv1d",
            Op::MeanPool { .. } => "mean_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::DftMag { .. } => "dft_magnitude",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::BceLogits { .. } => "bce_with_logits",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Conv1d { x, k, .. } => vec![*x, *k],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sqrt(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::SumAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::MeanPool { x, .. }
            | Op::MaxPool { x, .. }
            | Op::DftMag { x, .. }
            | Op::Slice { x, .. }
            | Op::BceLogits { z: x, .. }
            | Op::CrossEntropy { z: x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<TensorId>,
}

/// Recorded computation for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, extent, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `b` matches `a`, is a trailing suffix of it, or is a single element.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b == [1] || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by all recorded node values.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.value.len() * std::mem::size_of::<f64>())
            .sum()
    }

    fn var(&self, idx: usize) -> Var {
        Var { tape: self.id, idx }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::usage("variable does not belong to this tape"));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.idx].shape
    }

    /// Copies the node value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("tape values are finite")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, t: &Tensor, needs_grad: bool, param: Option<TensorId>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad,
            param,
        });
        self.var(self.nodes.len() - 1)
    }

    /// Records a tensor. Trainable tensors become gradient-tracked parameters.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let param = t.requires_grad().then(|| t.id());
        self.push_leaf(t, t.requires_grad(), param)
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(&t, false, None))
    }

    /// Records a gradient-tracked input that is not a parameter; its gradient
    /// is read back through [`Gradients::wrt`].
    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(&t, true, None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(&self.nodes[ia].value, &self.nodes[ib].value, m, k, n);
        self.push(vec![m, n], out, Op::MatMul(ia, ib))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = &self.nodes[ix].shape;
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose: expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(&self.nodes[ix].value, r, c);
        self.push(vec![c, r], out, Op::Transpose(ix))
    }

    fn binary(&mut self, a: Var, b: Var, kind: &str) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if !broadcast_ok(sa, sb) {
            return Err(Error::dim(format!(
                "{kind}: shape {sb:?} does not broadcast onto {sa:?}"
            )));
        }
        Ok((ia, ib))
    }

    fn zip_with(&self, ia: usize, ib: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let nb = vb.len();
        va.iter().enumerate().map(|(i, &x)| f(x, vb[i % nb])).collect()
    }

    /// Elementwise sum; `b` may broadcast onto `a` (trailing suffix or scalar).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "add")?;
        let out = self.zip_with(ia, ib, |x, y| x + y);
        self.push(self.nodes[ia].shape.clone(), out, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "sub")?;
        let out = self.zip_with(ia, ib, |x, y| x - y);
        self.push(self.nodes[ia].shape.clone(), out, Op::Sub(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "mul")?;
        let out = self.zip_with(ia, ib, |x, y| x * y);
        self.push(self.nodes[ia].shape.clone(), out, Op::Mul(ia, ib))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.iter().map(|v| v * c).collect();
        self.push(self.nodes[ix].shape.clone(), out, Op::Scale(ix, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(self.nodes[ix].shape.clone(), out, Op::Relu(ix))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        if self.nodes[ix].value.iter().any(|&v| v <= 0.0) {
            return Err(Error::usage("sqrt: inputs must be strictly positive"));
        }
        let out = self.nodes[ix].value.iter().map(|v| v.sqrt()).collect();
        self.push(self.nodes[ix].shape.clone(), out, Op::Sqrt(ix))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(ix))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::Mean(ix))
    }

    fn check_axis(&self, ix: usize, axis: usize, op: &str) -> Result<()> {
        let s = &self.nodes[ix].shape;
        if axis >= s.len() {
            return Err(Error::dim(format!("{op}: axis {axis} out of range for {s:?}")));
        }
        Ok(())
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        self.check_axis(ix, axis, "sum_axis")?;
        let shape = &self.nodes[ix].shape;
        let (outer, n, inner) = split_axis(shape, axis);
        let v = &self.nodes[ix].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        self.push(oshape, out, Op::SumAxis { x: ix, axis })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        self.check_axis(ix, axis, "softmax")?;
        let shape = self.nodes[ix].shape.clone();
        let (outer, n, inner) = split_axis(&shape, axis);
        let v = &self.nodes[ix].value;
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| v[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (v[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        self.push(shape, out, Op::Softmax { x: ix, axis })
    }

    /// Valid (unpadded) 1-D cross-correlation of `x: [ch_in, T]` with
    /// `kernels: [ch_out, ch_in, w]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (ix, ik) = (self.idx(x)?, self.idx(kernels)?);
        let (sx, sk) = (&self.nodes[ix].shape, &self.nodes[ik].shape);
        if sx.len() != 2 || sk.len() != 3 || sk[1] != sx[0] {
            return Err(Error::dim(format!(
                "conv1d: input {sx:?} incompatible with kernels {sk:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::usage("conv1d: stride must be positive"));
        }
        let (ci, t) = (sx[0], sx[1]);
        let (co, w) = (sk[0], sk[2]);
        if w > t {
            return Err(Error::dim(format!(
                "conv1d: kernel width {w} longer than signal length {t}"
            )));
        }
        let tout = (t - w) / stride + 1;
        let (xv, kv) = (&self.nodes[ix].value, &self.nodes[ik].value);
        let mut out = vec![0.0; co * tout];
        for o in 0..co {
            for c in 0..ci {
                let krow = &kv[(o * ci + c) * w..(o * ci + c + 1) * w];
                let xrow = &xv[c * t..(c + 1) * t];
                for p in 0..tout {
                    let start = p * stride;
                    let mut acc = 0.0;
                    for j in 0..w {
                        acc += krow[j] * xrow[start + j];
                    }
                    out[o * tout + p] += acc;
                }
            }
        }
        self.push(vec![co, tout], out, Op::Conv1d { x: ix, k: ik, stride })
    }

    fn pool_shape(&self, ix: usize, window: usize, op: &str) -> Result<(usize, usize, Vec<usize>)> {
        let shape = &self.nodes[ix].shape;
        let t = *shape.last().expect("shapes are nonempty");
        if window == 0 {
            return Err(Error::usage(format!("{op}: window must be positive")));
        }
        if window > t {
            return Err(Error::dim(format!("{op}: window {window} exceeds axis length {t}")));
        }
        let tout = t / window;
        let mut oshape = shape.clone();
        *oshape.last_mut().unwrap() = tout;
        Ok((t, tout, oshape))
    }

    /// Non-overlapping mean pooling over the last axis; a trailing remainder
    /// shorter than `window` is dropped.
    pub fn mean_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (t, tout, oshape) = self.pool_shape(ix, window, "mean_pool")?;
        let v = &self.nodes[ix].value;
        let rows = v.len() / t;
        let mut out = Vec::with_capacity(rows * tout);
        for r in 0..rows {
            for p in 0..tout {
                let s = r * t + p * window;
                out.push(v[s..s + window].iter().sum::<f64>() / window as f64);
            }
        }
        self.push(oshape, out, Op::MeanPool { x: ix, window })
    }

    /// Non-overlapping max pooling over the last axis. The gradient goes to
    /// the first maximal entry of each window.
    pub fn max_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (t, tout, oshape) = self.pool_shape(ix, window, "max_pool")?;
        let v = &self.nodes[ix].value;
        let rows = v.len() / t;
        let mut out = Vec::with_capacity(rows * tout);
        let mut argmax = Vec::with_capacity(rows * tout);
        for r in 0..rows {
            for p in 0..tout {
                let s = r * t + p * window;
                let mut best = s;
                for j in s + 1..s + window {
                    if v[j] > v[best] {
                        best = j;
                    }
                }
                out.push(v[best]);
                argmax.push(best);
            }
        }
        self.push(oshape, out, Op::MaxPool { x: ix, argmax })
    }

    /// Magnitude of the DFT over the last axis for the first `bins` bins.
    pub fn dft_magnitude(&mut self, x: Var, bins: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let shape = &self.nodes[ix].shape;
        let t = *shape.last().unwrap();
        if bins == 0 || bins > t {
            return Err(Error::dim(format!(
                "dft_magnitude: {bins} bins requested for axis length {t}"
            )));
        }
        let mut oshape = shape.clone();
        *oshape.last_mut().unwrap() = bins;
        let (cos, sin) = twiddles(t);
        let v = &self.nodes[ix].value;
        let rows = v.len() / t;
        let mut out = Vec::with_capacity(rows * bins);
        for r in 0..rows {
            let row = &v[r * t..(r + 1) * t];
            for k in 0..bins {
                let (re, im) = dft_bin(row, k, &cos, &sin);
                out.push(re.hypot(im));
            }
        }
        self.push(oshape, out, Op::DftMag { x: ix, bins })
    }

    /// Contiguous range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        self.check_axis(ix, axis, "slice")?;
        let shape = self.nodes[ix].shape.clone();
        if start >= end || end > shape[axis] {
            return Err(Error::dim(format!(
                "slice: range {start}..{end} invalid for axis {axis} of {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let v = &self.nodes[ix].value;
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&v[s..s + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push(oshape, out, Op::Slice { x: ix, axis, start })
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat: no inputs"));
        }
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[idxs[0]].shape.clone();
        self.check_axis(idxs[0], axis, "concat")?;
        let mut total = 0;
        for &i in &idxs {
            let s = &self.nodes[i].shape;
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat: shape {s:?} incompatible with {first:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idxs {
                let n = self.nodes[i].shape[axis];
                let v = &self.nodes[i].value;
                out.extend_from_slice(&v[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        self.push(oshape, out, Op::Concat { parts: idxs, axis })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = check_shape(shape)?;
        if n != self.nodes[ix].value.len() {
            return Err(Error::dim(format!(
                "reshape: {:?} has {} elements, target {shape:?} has {n}",
                self.nodes[ix].shape,
                self.nodes[ix].value.len()
            )));
        }
        let v = self.nodes[ix].value.clone();
        self.push(shape.to_vec(), v, Op::Reshape(ix))
    }

    /// Mean weighted binary cross-entropy on logits `z` (any shape with one
    /// value per sample).
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let iz = self.idx(z)?;
        let zv = &self.nodes[iz].value;
        if zv.len() != targets.len() || weights.len() != targets.len() {
            return Err(Error::dim(format!(
                "bce_with_logits: {} logits, {} targets, {} weights",
                zv.len(),
                targets.len(),
                weights.len()
            )));
        }
        let n = zv.len() as f64;
        let loss = zv
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &y), &w)| w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()))
            .sum::<f64>()
            / n;
        let op = Op::BceLogits {
            z: iz,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        self.push(vec![1], vec![loss], op)
    }

    /// Mean cross-entropy of `z: [batch, classes]` against class indices.
    pub fn cross_entropy(&mut self, z: Var, classes: &[usize]) -> Result<Var> {
        let iz = self.idx(z)?;
        let s = &self.nodes[iz].shape;
        if s.len() != 2 || s[0] != classes.len() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {s:?} vs {} targets",
                classes.len()
            )));
        }
        let (b, l) = (s[0], s[1]);
        if let Some(&c) = classes.iter().find(|&&c| c >= l) {
            return Err(Error::dim(format!("cross_entropy: class {c} out of range for {l} logits")));
        }
        let zv = &self.nodes[iz].value;
        let mut probs = vec![0.0; b * l];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &zv[i * l..(i + 1) * l];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..l {
                probs[i * l + j] = (row[j] - lse).exp();
            }
            loss += lse - row[classes[i]];
        }
        let op = Op::CrossEntropy {
            z: iz,
            classes: classes.to_vec(),
            probs,
        };
        self.push(vec![1], vec![loss / b as f64], op)
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss).map_err(|_| Error::usage("backward: output is not on this tape"))?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward: output must be a single element, got shape {:?}",
                self.nodes[root].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: HashMap<TensorId, Vec<f64>> = HashMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                match params.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(id, g.clone());
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params,
        })
    }

    /// Runs [`Tape::backward`] and adds the result into every trainable tensor
    /// in `params` that appeared on the tape.
    pub fn backward_into(&self, loss: Var, params: &mut [&mut Tensor]) -> Result<()> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(params)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |j: usize| self.nodes[j].needs_grad;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            let n = self.nodes[j].value.len();
            let slot = grads[j].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    // dA = dOut · Bᵀ
                    let bt = transpose_raw(&self.nodes[*b].value, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    acc(*a, &mut |s| add_into(s, &da));
                }
                if needs(*b) {
                    // dB = Aᵀ · dOut
                    let at = transpose_raw(&self.nodes[*a].value, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    acc(*b, &mut |s| add_into(s, &db));
                }
            }
            Op::Transpose(x) => {
                let s = &node.shape;
                let back = transpose_raw(g, s[0], s[1]);
                acc(*x, &mut |d| add_into(d, &back));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    acc(*a, &mut |s| add_into(s, g));
                }
                if needs(*b) {
                    acc(*b, &mut |s| {
                        let nb = s.len();
                        for (i, v) in g.iter().enumerate() {
                            s[i % nb] += sign * v;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let nb = vb.len();
                if needs(*a) {
                    acc(*a, &mut |s| {
                        for (i, v) in g.iter().enumerate() {
                            s[i] += v * vb[i % nb];
                        }
                    });
                }
                if needs(*b) {
                    acc(*b, &mut |s| {
                        for (i, v) in g.iter().enumerate() {
                            s[i % nb] += v * va[i];
                        }
                    });
                }
            }
            Op::Scale(x, c) => acc(*x, &mut |s| {
                for (d, v) in s.iter_mut().zip(g) {
                    *d += c * v;
                }
            }),
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * 0.5 / y[i];
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(&self.nodes[*x].shape, *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                s[(o * n + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                })
            }
            Op::Conv1d { x, k, stride } => {
                let (sx, sk) = (&self.nodes[*x].shape, &self.nodes[*k].shape);
                let (ci, t, co, w) = (sx[0], sx[1], sk[0], sk[2]);
                let tout = node.shape[1];
                let (xv, kv) = (&self.nodes[*x].value, &self.nodes[*k].value);
                if needs(*x) {
                    acc(*x, &mut |s| {
                        for o in 0..co {
                            for c in 0..ci {
                                let krow = &kv[(o * ci + c) * w..(o * ci + c + 1) * w];
                                for p in 0..tout {
                                    let gv = g[o * tout + p];
                                    let base = c * t + p * stride;
                                    for j in 0..w {
                                        s[base + j] += gv * krow[j];
                                    }
                                }
                            }
                        }
                    });
                }
                if needs(*k) {
                    acc(*k, &mut |s| {
                        for o in 0..co {
                            for c in 0..ci {
                                for p in 0..tout {
                                    let gv = g[o * tout + p];
                                    let base = c * t + p * stride;
                                    for j in 0..w {
                                        s[(o * ci + c) * w + j] += gv * xv[base + j];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::MeanPool { x, window } => {
                let t = *self.nodes[*x].shape.last().unwrap();
                let tout = *node.shape.last().unwrap();
                let inv = 1.0 / *window as f64;
                acc(*x, &mut |s| {
                    for (oi, gv) in g.iter().enumerate() {
                        let (r, p) = (oi / tout, oi % tout);
                        let base = r * t + p * window;
                        for d in &mut s[base..base + window] {
                            *d += gv * inv;
                        }
                    }
                })
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |s| {
                for (gv, &j) in g.iter().zip(argmax) {
                    s[j] += gv;
                }
            }),
            Op::DftMag { x, bins } => {
                let t = *self.nodes[*x].shape.last().unwrap();
                let (cos, sin) = twiddles(t);
                let xv = &self.nodes[*x].value;
                let mag = &node.value;
                acc(*x, &mut |s| {
                    let rows = s.len() / t;
                    for r in 0..rows {
                        let row = &xv[r * t..(r + 1) * t];
                        for k in 0..*bins {
                            let oi = r * bins + k;
                            if mag[oi] == 0.0 {
                                continue;
                            }
                            let (re, im) = dft_bin(row, k, &cos, &sin);
                            let scale = g[oi] / mag[oi];
                            for tt in 0..t {
                                let a = (k * tt) % t;
                                s[r * t + tt] += scale * (re * cos[a] - im * sin[a]);
                            }
                        }
                    }
                })
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(&self.nodes[*x].shape, *axis);
                let len = node.shape[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut s[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].shape[*axis];
                    if needs(p) {
                        acc(p, &mut |s| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                add_into(&mut s[o * n * inner..(o + 1) * n * inner], &g[src..src + n * inner]);
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::BceLogits { z, targets, weights } => {
                let zv = &self.nodes[*z].value;
                let n = zv.len() as f64;
                acc(*z, &mut |s| {
                    for i in 0..s.len() {
                        let p = sigmoid(zv[i]);
                        s[i] += g[0] * weights[i] * (p - targets[i]) / n;
                    }
                })
            }
            Op::CrossEntropy { z, classes, probs } => {
                let l = self.nodes[*z].shape[1];
                let b = classes.len() as f64;
                acc(*z, &mut |s| {
                    for (i, &c) in classes.iter().enumerate() {
                        for j in 0..l {
                            let onehot = if j == c { 1.0 } else { 0.0 };
                            s[i * l + j] += g[0] * (probs[i * l + j] - onehot) / b;
                        }
                    }
                })
            }
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Vec<f64>>>,
    params: HashMap<TensorId, Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to any tape node; `None` if it was not reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Summed gradient for a parameter across all of its leaves.
    pub fn param(&self, id: TensorId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Adds gradients into each trainable tensor that was used on the tape.
    pub fn accumulate_into(&self, params: &mut [&mut Tensor]) -> Result<()> {
        for p in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            if let Some(g) = self.params.get(&p.id()) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(v: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = v[i * c + j];
        }
    }
    out
}

/// `cos(2πa/T)` and `sin(2πa/T)` for `a in 0..T`.
fn twiddles(t: usize) -> (Vec<f64>, Vec<f64>) {
    (0..t)
        .map(|a| {
            let th = 2.0 * PI * a as f64 / t as f64;
            (th.cos(), th.sin())
        })
        .unzip()
}

/// Real and imaginary parts of `Σ x_t e^{-2πikt/T}`.
fn dft_bin(row: &[f64], k: usize, cos: &[f64], sin: &[f64]) -> (f64, f64) {
    let t = row.len();
    let mut re = 0.0;
    let mut im = 0.0;
    for (tt, &x) in row.iter().enumerate() {
        let a = (k * tt) % t;
        re += x * cos[a];
        im -= x * sin[a];
    }
    (re, im)
}
