use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Operation kinds recorded on the tape.
///
/// The first group is the public op set; the second group exists so that
/// backward passes can themselves be expressed as tape nodes (which is what
/// makes second-order gradients work).
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Matmul,
    Add,
    Mul,
    Concat,
    Sigmoid,
    Tanh,
    Mean,
    Mse,
    FrobSq,
    Scale(f64),
    // internal ops used by backward rules
    Transpose,
    Reshape(Vec<usize>),
    Slice { start: usize, len: usize },
    Scatter { start: usize, total: usize },
    Broadcast(Vec<usize>),
    SumAll,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Mul => "elementwise-multiply",
            Op::Concat => "concat",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Mean => "mean",
            Op::Mse => "mse",
            Op::FrobSq => "frobenius-squared",
            Op::Scale(_) => "scale",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Scatter { .. } => "scatter",
            Op::Broadcast(_) => "broadcast",
            Op::SumAll => "sum-all",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Handle to a tensor living on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    id: usize,
}

/// Append-only computation record. One tape per loss evaluation; dropped
/// afterwards. Confined to a single worker.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    nan_guard: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            nan_guard: false,
        }
    }

    pub fn with_nan_guard() -> Self {
        let mut t = Self::new();
        t.nan_guard = true;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape_id != self.id || v.id >= self.nodes.len() {
            return Err(Error::DetachedFromTape);
        }
        Ok(())
    }

    /// Record a gradient-carrying leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Record a constant (never accumulates a gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Var { tape_id: self.id, id: self.nodes.len() - 1 }
    }

    /// Record one operation. Shape checking happens here; the node is kept
    /// even when no input requires a gradient (the tape doubles as the value
    /// store), but such nodes are skipped by backward.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            self.check(*v)?;
        }
        if op == Op::Leaf {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: "leaf nodes are created with leaf()/constant(), not apply()".into(),
            });
        }
        let value = self.forward(&op, inputs)?;
        if self.nan_guard && !value.data().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(op, ids, value, rg))
    }

    fn forward(&self, op: &Op, inputs: &[Var]) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.id].value;
        let mismatch = |detail: String| Error::ShapeMismatch { op: op.name(), detail };
        match op {
            Op::Leaf => unreachable!(),
            Op::Matmul => {
                let (a, b) = (val(&inputs[0]), val(&inputs[1]));
                match (a.shape(), b.shape()) {
                    ([m, k], [k2, n]) if k == k2 => {
                        let (m, k, n) = (*m, *k, *n);
                        let mut out = vec![0.0; m * n];
                        let (ad, bd) = (a.data(), b.data());
                        for i in 0..m {
                            for p in 0..k {
                                let aik = ad[i * k + p];
                                if aik == 0.0 {
                                    continue;
                                }
                                let brow = &bd[p * n..(p + 1) * n];
                                let orow = &mut out[i * n..(i + 1) * n];
                                for j in 0..n {
                                    orow[j] += aik * brow[j];
                                }
                            }
                        }
                        Tensor::new(vec![m, n], out)
                    }
                    ([m, k], [k2]) if k == k2 => {
                        let (m, k) = (*m, *k);
                        let (ad, bd) = (a.data(), b.data());
                        let mut out = vec![0.0; m];
                        for i in 0..m {
                            let row = &ad[i * k..(i + 1) * k];
                            out[i] = row.iter().zip(bd).map(|(x, y)| x * y).sum();
                        }
                        Tensor::new(vec![m], out)
                    }
                    (sa, sb) => Err(mismatch(format!("{:?} x {:?}", sa, sb))),
                }
            }
            Op::Add | Op::Mul => {
                let (a, b) = (val(&inputs[0]), val(&inputs[1]));
                if a.shape() != b.shape() {
                    return Err(mismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| if *op == Op::Add { x + y } else { x * y })
                    .collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::Concat => {
                if inputs.is_empty() {
                    return Err(mismatch("no inputs".into()));
                }
                let mut data = Vec::new();
                for v in inputs {
                    let t = val(v);
                    if t.shape().len() != 1 {
                        return Err(mismatch(format!("rank-1 required, got {:?}", t.shape())));
                    }
                    data.extend_from_slice(t.data());
                }
                Ok(Tensor::vector(data))
            }
            Op::Sigmoid => {
                // clamped into the open interval so saturation never returns
                // an exact 0 or 1
                const HI: f64 = 1.0 - f64::EPSILON / 2.0;
                let a = val(&inputs[0]);
                let data = a
                    .data()
                    .iter()
                    .map(|x| (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, HI))
                    .collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::Tanh => {
                const HI: f64 = 1.0 - f64::EPSILON / 2.0;
                let a = val(&inputs[0]);
                let data = a.data().iter().map(|x| x.tanh().clamp(-HI, HI)).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::Mean => {
                let a = val(&inputs[0]);
                if a.is_empty() {
                    return Err(mismatch("mean over empty tensor".into()));
                }
                let s: f64 = a.data().iter().sum();
                Ok(Tensor::scalar(s / a.len() as f64))
            }
            Op::Mse => {
                let (a, b) = (val(&inputs[0]), val(&inputs[1]));
                if a.shape() != b.shape() {
                    return Err(mismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                if a.is_empty() {
                    return Err(mismatch("mse over empty tensor".into()));
                }
                let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                Ok(Tensor::scalar(s / a.len() as f64))
            }
            Op::FrobSq => {
                let a = val(&inputs[0]);
                let s: f64 = a.data().iter().map(|x| x * x).sum();
                Ok(Tensor::scalar(s))
            }
            Op::Scale(c) => {
                let a = val(&inputs[0]);
                let data = a.data().iter().map(|x| c * x).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::Transpose => {
                let a = val(&inputs[0]);
                match a.shape() {
                    [m, n] => {
                        let (m, n) = (*m, *n);
                        let mut out = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                out[j * m + i] = a.data()[i * n + j];
                            }
                        }
                        Tensor::new(vec![n, m], out)
                    }
                    s => Err(mismatch(format!("rank-2 required, got {:?}", s))),
                }
            }
            Op::Reshape(shape) => {
                let a = val(&inputs[0]);
                let n: usize = shape.iter().product();
                if n != a.len() {
                    return Err(mismatch(format!("{:?} -> {:?}", a.shape(), shape)));
                }
                Tensor::new(shape.clone(), a.data().to_vec())
            }
            Op::Slice { start, len } => {
                let a = val(&inputs[0]);
                if a.shape().len() != 1 || start + len > a.len() {
                    return Err(mismatch(format!(
                        "slice [{}, {}) of {:?}",
                        start,
                        start + len,
                        a.shape()
                    )));
                }
                Ok(Tensor::vector(a.data()[*start..start + len].to_vec()))
            }
            Op::Scatter { start, total } => {
                let a = val(&inputs[0]);
                if a.shape().len() != 1 || start + a.len() > *total {
                    return Err(mismatch(format!(
                        "scatter {:?} at {} into length {}",
                        a.shape(),
                        start,
                        total
                    )));
                }
                let mut out = vec![0.0; *total];
                out[*start..start + a.len()].copy_from_slice(a.data());
                Ok(Tensor::vector(out))
            }
            Op::Broadcast(shape) => {
                let a = val(&inputs[0]);
                if a.len() != 1 {
                    return Err(mismatch(format!("scalar required, got {:?}", a.shape())));
                }
                let n: usize = shape.iter().product();
                Tensor::new(shape.clone(), vec![a.item(); n])
            }
            Op::SumAll => {
                let a = val(&inputs[0]);
                Ok(Tensor::scalar(a.data().iter().sum()))
            }
        }
    }

    // convenience wrappers

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn concat(&mut self, vs: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, vs)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mse, &[a, b])
    }
    pub fn frob_sq(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::FrobSq, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Reshape(shape), &[a])
    }
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { start, len }, &[a])
    }
    /// W x + b for a matrix W, vector x, vector b.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wx = self.matmul(w, x)?;
        self.add(wx, b)
    }

    /// Reverse pass from a scalar loss. Adjoints are built as tape nodes, so
    /// a gradient can be fed into further ops and differentiated again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.nodes[loss.id].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.id].value.shape().to_vec()));
        }
        if !self.nodes[loss.id].requires_grad {
            // Loss constant in all parameters: every gradient is zero.
            return Ok(Gradients { tape_id: self.id, adj: vec![None; loss.id + 1] });
        }
        let mut adj: Vec<Option<Var>> = vec![None; loss.id + 1];
        let seed_shape = self.nodes[loss.id].value.shape().to_vec();
        let seed = self.constant(Tensor::new(seed_shape, vec![1.0]).unwrap());
        adj[loss.id] = Some(seed);

        for idx in (0..=loss.id).rev() {
            let Some(g) = adj[idx] else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let inputs = self.nodes[idx].inputs.clone();
            let out = Var { tape_id: self.id, id: idx };
            match op {
                Op::Leaf => {}
                Op::Matmul => {
                    let a = Var { tape_id: self.id, id: inputs[0] };
                    let b = Var { tape_id: self.id, id: inputs[1] };
                    let b_rank = self.nodes[inputs[1]].value.shape().len();
                    if b_rank == 2 {
                        if self.nodes[inputs[0]].requires_grad {
                            let bt = self.apply(Op::Transpose, &[b])?;
                            let da = self.matmul(g, bt)?;
                            self.accumulate(&mut adj, inputs[0], da)?;
                        }
                        if self.nodes[inputs[1]].requires_grad {
                            let at = self.apply(Op::Transpose, &[a])?;
                            let db = self.matmul(at, g)?;
                            self.accumulate(&mut adj, inputs[1], db)?;
                        }
                    } else {
                        // matrix-vector: out[m] = A[m,k] b[k]
                        let m = self.nodes[inputs[0]].value.shape()[0];
                        let k = self.nodes[inputs[0]].value.shape()[1];
                        if self.nodes[inputs[0]].requires_grad {
                            let gc = self.reshape(g, vec![m, 1])?;
                            let br = self.reshape(b, vec![1, k])?;
                            let da = self.matmul(gc, br)?;
                            self.accumulate(&mut adj, inputs[0], da)?;
                        }
                        if self.nodes[inputs[1]].requires_grad {
                            let at = self.apply(Op::Transpose, &[a])?;
                            let db = self.matmul(at, g)?;
                            self.accumulate(&mut adj, inputs[1], db)?;
                        }
                    }
                }
                Op::Add => {
                    for &i in &inputs {
                        if self.nodes[i].requires_grad {
                            self.accumulate(&mut adj, i, g)?;
                        }
                    }
                }
                Op::Mul => {
                    let a = Var { tape_id: self.id, id: inputs[0] };
                    let b = Var { tape_id: self.id, id: inputs[1] };
                    if self.nodes[inputs[0]].requires_grad {
                        let da = self.mul(g, b)?;
                        self.accumulate(&mut adj, inputs[0], da)?;
                    }
                    if self.nodes[inputs[1]].requires_grad {
                        let db = self.mul(g, a)?;
                        self.accumulate(&mut adj, inputs[1], db)?;
                    }
                }
                Op::Concat => {
                    let mut off = 0;
                    for &i in &inputs {
                        let n = self.nodes[i].value.len();
                        if self.nodes[i].requires_grad {
                            let gi = self.slice(g, off, n)?;
                            self.accumulate(&mut adj, i, gi)?;
                        }
                        off += n;
                    }
                }
                Op::Sigmoid => {
                    if self.nodes[inputs[0]].requires_grad {
                        let shape = self.nodes[idx].value.shape().to_vec();
                        let n = self.nodes[idx].value.len();
                        let ones = self.constant(Tensor::new(shape, vec![1.0; n]).unwrap());
                        let ny = self.scale(out, -1.0)?;
                        let omy = self.add(ones, ny)?;
                        let yomy = self.mul(out, omy)?;
                        let dx = self.mul(g, yomy)?;
                        self.accumulate(&mut adj, inputs[0], dx)?;
                    }
                }
                Op::Tanh => {
                    if self.nodes[inputs[0]].requires_grad {
                        let yy = self.mul(out, out)?;
                        let gyy = self.mul(g, yy)?;
                        let ngyy = self.scale(gyy, -1.0)?;
                        let dx = self.add(g, ngyy)?;
                        self.accumulate(&mut adj, inputs[0], dx)?;
                    }
                }
                Op::Mean => {
                    if self.nodes[inputs[0]].requires_grad {
                        let shape = self.nodes[inputs[0]].value.shape().to_vec();
                        let n = self.nodes[inputs[0]].value.len();
                        let c = self.scale(g, 1.0 / n as f64)?;
                        let dx = self.apply(Op::Broadcast(shape), &[c])?;
                        self.accumulate(&mut adj, inputs[0], dx)?;
                    }
                }
                Op::Mse => {
                    let a = Var { tape_id: self.id, id: inputs[0] };
                    let b = Var { tape_id: self.id, id: inputs[1] };
                    let shape = self.nodes[inputs[0]].value.shape().to_vec();
                    let n = self.nodes[inputs[0]].value.len();
                    let diff = self.sub(a, b)?;
                    let c = self.scale(g, 2.0 / n as f64)?;
                    let cb = self.apply(Op::Broadcast(shape), &[c])?;
                    let da = self.mul(cb, diff)?;
                    if self.nodes[inputs[0]].requires_grad {
                        self.accumulate(&mut adj, inputs[0], da)?;
                    }
                    if self.nodes[inputs[1]].requires_grad {
                        let db = self.scale(da, -1.0)?;
                        self.accumulate(&mut adj, inputs[1], db)?;
                    }
                }
                Op::FrobSq => {
                    if self.nodes[inputs[0]].requires_grad {
                        let a = Var { tape_id: self.id, id: inputs[0] };
                        let shape = self.nodes[inputs[0]].value.shape().to_vec();
                        let c = self.scale(g, 2.0)?;
                        let cb = self.apply(Op::Broadcast(shape), &[c])?;
                        let dx = self.mul(cb, a)?;
                        self.accumulate(&mut adj, inputs[0], dx)?;
                    }
                }
                Op::Scale(c) => {
                    if self.nodes[inputs[0]].requires_grad {
                        let dx = self.scale(g, c)?;
                        self.accumulate(&mut adj, inputs[0], dx)?;
                    }
                }
                Op::Transpose => {
                    if self.nodes[inputs[0]].requires_grad {
                        let dx = self.apply(Op::Transpose, &[g])?;
                        self.accumulate(&mut adj, inputs[0], dx)?;
                    }
                }
                Op::Reshape(_) => {
                    if self.nodes[inputs[0]].requires_grad {
                        let shape = self.nodes[inputs[0]].value.shape().to_vec();
                        let dx = self.reshape(g, shape)?;
                        self.accumulate(&mut adj, inputs[0], dx)?;
                    }
                }
                Op::Slice { start, len } => {
                    if self.nodes[inputs[0]].requires_grad {
                        let total = self.nodes[inputs[0]].value.len();
                        let _ = len;
                        let dx = self.apply(Op::Scatter { start, total }, &[g])?;
                        self.accumulate(&mut adj, inputs[0], dx)?;
                    }
                }
                Op::Scatter { start, .. } => {
                    if self.nodes[inputs[0]].requires_grad {
                        let len = self.nodes[inputs[0]].value.len();
                        let dx = self.slice(g, start, len)?;
                        self.accumulate(&mut adj, inputs[0], dx)?;
                    }
                }
                Op::Broadcast(_) => {
                    if self.nodes[inputs[0]].requires_grad {
                        let s = self.apply(Op::SumAll, &[g])?;
                        let shape = self.nodes[inputs[0]].value.shape().to_vec();
                        let dx = self.reshape(s, shape)?;
                        self.accumulate(&mut adj, inputs[0], dx)?;
                    }
                }
                Op::SumAll => {
                    if self.nodes[inputs[0]].requires_grad {
                        let shape = self.nodes[inputs[0]].value.shape().to_vec();
                        let dx = self.apply(Op::Broadcast(shape), &[g])?;
                        self.accumulate(&mut adj, inputs[0], dx)?;
                    }
                }
            }
        }
        Ok(Gradients { tape_id: self.id, adj })
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], idx: usize, contrib: Var) -> Result<()> {
        adj[idx] = Some(match adj[idx] {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        });
        Ok(())
    }
}

/// Result of a backward pass: adjoint handles per node.
pub struct Gradients {
    tape_id: u64,
    adj: Vec<Option<Var>>,
}

impl Gradients {
    /// On-tape adjoint of `v`, if `v` was reached by the backward sweep.
    pub fn var_wrt(&self, v: Var) -> Option<Var> {
        if v.tape_id != self.tape_id {
            return None;
        }
        self.adj.get(v.id).copied().flatten()
    }

    /// Gradient value of `v`; zeros when `v` is unreachable from the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.var_wrt(v) {
            Some(g) => tape.value(g).clone(),
            None => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
    }
}

/// A [`ParamSet`] bound onto a tape: one leaf (or derived node) per name.
#[derive(Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParamSet, requires_grad: bool) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in params.iter() {
            let v = if requires_grad {
                tape.leaf(tensor.clone())
            } else {
                tape.constant(tensor.clone())
            };
            vars.insert(name.to_string(), v);
        }
        BoundParams { vars }
    }

    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Names under `prefix` with the prefix stripped, bound handles kept.
    pub fn sub(&self, prefix: &str) -> BoundParams {
        let vars = self
            .vars
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), *v)))
            .collect();
        BoundParams { vars }
    }

    /// Extract gradients by name after a backward pass. Unreached leaves get
    /// zero gradients.
    pub fn grads(&self, tape: &Tape, g: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, v)| (name.clone(), g.wrt(tape, *v)))
            .collect()
    }

    /// Snapshot current values into a [`ParamSet`].
    pub fn values(&self, tape: &Tape) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, v) in &self.vars {
            ps.insert(name.clone(), tape.value(*v).clone());
        }
        ps
    }
}
