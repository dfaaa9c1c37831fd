//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Trainable weights live in a [`ParamStore`]. A [`Graph`] borrows the store
//! read-only, records every forward operation on a linear tape and, on
//! [`Graph::backward`], returns a [`Grads`] buffer that the caller folds into
//! the store with [`ParamStore::accumulate`]. Keeping the tape separate from
//! the store lets many graphs evaluate the same parameters concurrently while
//! gradient accumulation stays a serial step.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Largest value returned by the clamped negative log.
pub const NEG_LOG_CLAMP: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named trainable tensors with gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "parameter {name:?} registered twice"
            )));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            trainable: true,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds a gradient buffer into the stored gradients of trainable parameters.
    pub fn accumulate(&mut self, grads: &Grads) {
        for (p, g) in self.params.iter_mut().zip(&grads.entries) {
            if let (true, Some(g)) = (p.trainable, g) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Sparse per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    entries: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(num_params: usize) -> Self {
        Self {
            entries: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(id.0).and_then(Option::as_ref)
    }

    fn add_tensor(&mut self, id: ParamId, g: Tensor) {
        if self.entries.len() <= id.0 {
            self.entries.resize(id.0 + 1, None);
        }
        match &mut self.entries[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (i, g) in other.entries.iter().enumerate() {
            if let Some(g) = g {
                self.add_tensor(ParamId(i), g.clone());
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.iter_mut().flatten() {
            g.scale_in_place(factor);
        }
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    HuberAbs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Concat(Vec<Var>),
    ConcatCols(Var, Var),
    BroadcastRows(Var),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    MulConst(Var, Tensor),
    VecMat(Var, Var),
    NegLogClamped(Var, usize),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

/// A recording of forward computations against a borrowed [`ParamStore`].
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `W x + b` for a vector `x: [m]`, or row-wise for a matrix `x: [N × m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 {
            return Err(shape_err("linear", format!("weight shape {:?}", wv.shape())));
        }
        let (k, m) = (wv.shape()[0], wv.shape()[1]);
        let x_is_vec = xv.rank() == 1;
        if xv.rank() > 2 || xv.cols() != m || xv.rank() == 0 {
            return Err(shape_err(
                "linear",
                format!("input {:?} against weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let rows = if x_is_vec { 1 } else { xv.shape()[0] };
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != k {
                    return Err(shape_err(
                        "linear",
                        format!("bias {:?} for {k} outputs", bv.shape()),
                    ));
                }
                Some(bv.data())
            }
            None => None,
        };
        let xd = xv.data();
        let wd = wv.data();
        let mut out = vec![0.0; rows * k];
        for n in 0..rows {
            let xr = &xd[n * m..(n + 1) * m];
            let orow = &mut out[n * k..(n + 1) * k];
            for (kk, o) in orow.iter_mut().enumerate() {
                let wr = &wd[kk * m..(kk + 1) * m];
                let mut acc = bias.map_or(0.0, |b| b[kk]);
                for (a, c) in wr.iter().zip(xr) {
                    acc += a * c;
                }
                *o = acc;
            }
        }
        let shape = if x_is_vec { vec![k] } else { vec![rows, k] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        self.push(t, Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Var {
        let t = self.value(a).map(|x| x + shift);
        self.push(t, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a))
    }

    /// Elementwise Huber loss of the magnitude: `huber(|x|)`.
    pub fn huber_abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| {
            let e = x.abs();
            if e <= 1.0 {
                0.5 * e * e
            } else {
                e - 0.5
            }
        });
        self.push(t, Op::HuberAbs(a))
    }

    fn require_vector(&self, a: Var, op: &'static str) -> Result<()> {
        if self.value(a).rank() != 1 {
            return Err(shape_err(op, format!("expected a vector, got {:?}", self.value(a).shape())));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.require_vector(a, "softmax")?;
        let t = Tensor::vector(crate::tensor::softmax(self.value(a).data()));
        Ok(self.push(t, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.require_vector(a, "log_softmax")?;
        let t = Tensor::vector(crate::tensor::log_softmax(self.value(a).data()));
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Flattens and concatenates any number of nodes into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err("concat_cols", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let rows = av.shape()[0];
        let (p, q) = (av.shape()[1], bv.shape()[1]);
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&bv.data()[r * q..(r + 1) * q]);
        }
        let t = Tensor::new(vec![rows, p + q], data)?;
        Ok(self.push(t, Op::ConcatCols(a, b)))
    }

    /// Repeats a vector `[d]` as `rows` identical rows `[rows × d]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.require_vector(a, "broadcast_rows")?;
        let v = self.value(a);
        let d = v.len();
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(t, Op::BroadcastRows(a)))
    }

    /// Picks flat elements into a new vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(shape_err("gather", format!("index {bad} out of {}", v.len())));
        }
        let data = indices.iter().map(|&i| v.data()[i]).collect();
        Ok(self.push(Tensor::vector(data), Op::Gather(a, indices.to_vec())))
    }

    /// Picks rows of a matrix; used for embedding lookup and interaction rows.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(shape_err("gather_rows", format!("expected a matrix, got {:?}", v.shape())));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(shape_err("gather_rows", format!("row {i} out of {rows}")));
            }
            data.extend_from_slice(v.row(i));
        }
        let t = Tensor::new(vec![indices.len(), cols], data)?;
        Ok(self.push(t, Op::GatherRows(a, indices.to_vec())))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let r = self.gather_rows(a, &[i])?;
        let cols = self.value(r).cols();
        self.reshape(r, vec![cols])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Elementwise product with a constant tensor (dropout masks, fixed weights).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let v = self.value(a);
        if v.shape() != c.shape() {
            return Err(shape_err("mul_const", format!("{:?} vs {:?}", v.shape(), c.shape())));
        }
        let data = v.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulConst(a, c)))
    }

    /// `Σ_i a_i M_i` for weights `a: [N]` and rows of `M: [N × d]`.
    pub fn vec_mat(&mut self, a: Var, m: Var) -> Result<Var> {
        let (av, mv) = (self.value(a), self.value(m));
        if av.rank() != 1 || mv.rank() != 2 || mv.shape()[0] != av.len() {
            return Err(shape_err("vec_mat", format!("{:?} vs {:?}", av.shape(), mv.shape())));
        }
        let d = mv.shape()[1];
        let mut out = vec![0.0; d];
        for (i, &w) in av.data().iter().enumerate() {
            for (o, x) in out.iter_mut().zip(mv.row(i)) {
                *o += w * x;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::VecMat(a, m)))
    }

    /// `−log p[target]` of a probability vector, clamped at [`NEG_LOG_CLAMP`].
    pub fn neg_log_prob(&mut self, p: Var, target: usize) -> Result<Var> {
        let v = self.value(p);
        if target >= v.len() {
            return Err(Error::InvalidArgument(format!(
                "target {target} out of range for {} classes",
                v.len()
            )));
        }
        let pt = v.data()[target];
        let out = if pt > (-NEG_LOG_CLAMP).exp() {
            -pt.ln()
        } else {
            NEG_LOG_CLAMP
        };
        Ok(self.push(Tensor::scalar(out), Op::NegLogClamped(p, target)))
    }

    /// Cross-entropy of raw logits against a class index via log-softmax.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).len();
        if target >= n {
            return Err(Error::InvalidArgument(format!(
                "target {target} out of range for {n} classes"
            )));
        }
        let lp = self.log_softmax(logits)?;
        let picked = self.gather(lp, &[target])?;
        let s = self.sum(picked);
        Ok(self.neg(s))
    }

    /// Runs reverse accumulation from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Grads::new(self.store.len());

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.add_tensor(*id, gy),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (k, m) = (wv.shape()[0], wv.shape()[1]);
                    let rows = gy.len() / k;
                    let mut gx = vec![0.0; rows * m];
                    let mut gw = vec![0.0; k * m];
                    let mut gb = vec![0.0; k];
                    let (xd, wd, gd) = (xv.data(), wv.data(), gy.data());
                    for n in 0..rows {
                        let xr = &xd[n * m..(n + 1) * m];
                        let gxr = &mut gx[n * m..(n + 1) * m];
                        for kk in 0..k {
                            let g = gd[n * k + kk];
                            if g == 0.0 {
                                continue;
                            }
                            gb[kk] += g;
                            let wr = &wd[kk * m..(kk + 1) * m];
                            let gwr = &mut gw[kk * m..(kk + 1) * m];
                            for j in 0..m {
                                gxr[j] += g * wr[j];
                                gwr[j] += g * xr[j];
                            }
                        }
                    }
                    let gx = Tensor::new(xv.shape().to_vec(), gx)?;
                    let gw = Tensor::new(vec![k, m], gw)?;
                    accum(&mut grads, *x, gx);
                    accum(&mut grads, *w, gw);
                    if let Some(b) = b {
                        let gb = Tensor::new(self.value(*b).shape().to_vec(), gb)?;
                        accum(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, gy.clone());
                    accum(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, gy.clone());
                    accum(&mut grads, *b, gy.map(|g| -g));
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&gy, self.value(*b), |g, y| g * y);
                    let gb = zip_map(&gy, self.value(*a), |g, x| g * x);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => accum(&mut grads, *a, gy.map(|g| g * f)),
                Op::Offset(a) => accum(&mut grads, *a, gy),
                Op::Tanh(a) => {
                    let g = zip_map(&gy, self.value(Var(i)), |g, y| g * (1.0 - y * y));
                    accum(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let g = zip_map(&gy, self.value(Var(i)), |g, y| g * y * (1.0 - y));
                    accum(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let g = zip_map(&gy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accum(&mut grads, *a, g);
                }
                Op::Exp(a) => {
                    let g = zip_map(&gy, self.value(Var(i)), |g, y| g * y);
                    accum(&mut grads, *a, g);
                }
                Op::Log(a) => {
                    let g = zip_map(&gy, self.value(*a), |g, x| g / x);
                    accum(&mut grads, *a, g);
                }
                Op::HuberAbs(a) => {
                    let g = zip_map(&gy, self.value(*a), |g, x| {
                        if x.abs() <= 1.0 {
                            g * x
                        } else {
                            g * x.signum()
                        }
                    });
                    accum(&mut grads, *a, g);
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let inner: f64 = gy.data().iter().zip(y.data()).map(|(g, p)| g * p).sum();
                    let g = zip_map(&gy, y, |g, p| p * (g - inner));
                    accum(&mut grads, *a, g);
                }
                Op::LogSoftmax(a) => {
                    let y = self.value(Var(i));
                    let total = gy.sum();
                    let g = zip_map(&gy, y, |g, lp| g - lp.exp() * total);
                    accum(&mut grads, *a, g);
                }
                Op::Sum(a) => {
                    let g = gy.item();
                    accum(&mut grads, *a, Tensor::full(self.value(*a).shape(), g));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let n = pv.len();
                        let g = Tensor::new(pv.shape().to_vec(), gy.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        accum(&mut grads, *p, g);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (p, q) = (self.value(*a).shape()[1], self.value(*b).shape()[1]);
                    let rows = self.value(*a).shape()[0];
                    let mut ga = Vec::with_capacity(rows * p);
                    let mut gb = Vec::with_capacity(rows * q);
                    for r in 0..rows {
                        let row = &gy.data()[r * (p + q)..(r + 1) * (p + q)];
                        ga.extend_from_slice(&row[..p]);
                        gb.extend_from_slice(&row[p..]);
                    }
                    accum(&mut grads, *a, Tensor::new(vec![rows, p], ga)?);
                    accum(&mut grads, *b, Tensor::new(vec![rows, q], gb)?);
                }
                Op::BroadcastRows(a) => {
                    let d = self.value(*a).len();
                    let mut g = vec![0.0; d];
                    for chunk in gy.data().chunks(d.max(1)) {
                        for (acc, v) in g.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accum(&mut grads, *a, Tensor::vector(g));
                }
                Op::Gather(a, idx) => {
                    let mut g = Tensor::zeros(self.value(*a).shape());
                    for (&j, v) in idx.iter().zip(gy.data()) {
                        g.data_mut()[j] += v;
                    }
                    accum(&mut grads, *a, g);
                }
                Op::GatherRows(a, idx) => {
                    let mut g = Tensor::zeros(self.value(*a).shape());
                    let cols = g.cols();
                    for (r, &j) in idx.iter().enumerate() {
                        let src = &gy.data()[r * cols..(r + 1) * cols];
                        for (d, s) in g.data_mut()[j * cols..(j + 1) * cols].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accum(&mut grads, *a, g);
                }
                Op::Reshape(a) => {
                    let g = gy.reshaped(self.value(*a).shape().to_vec())?;
                    accum(&mut grads, *a, g);
                }
                Op::MulConst(a, c) => {
                    accum(&mut grads, *a, zip_map(&gy, c, |g, c| g * c));
                }
                Op::VecMat(a, m) => {
                    let (av, mv) = (self.value(*a), self.value(*m));
                    let d = mv.shape()[1];
                    let mut ga = vec![0.0; av.len()];
                    let mut gm = vec![0.0; mv.len()];
                    for (r, ga_r) in ga.iter_mut().enumerate() {
                        let row = mv.row(r);
                        *ga_r = crate::tensor::dot(row, gy.data());
                        let w = av.data()[r];
                        for (dst, g) in gm[r * d..(r + 1) * d].iter_mut().zip(gy.data()) {
                            *dst = w * g;
                        }
                    }
                    accum(&mut grads, *a, Tensor::vector(ga));
                    accum(&mut grads, *m, Tensor::new(mv.shape().to_vec(), gm)?);
                }
                Op::NegLogClamped(p, t) => {
                    let pv = self.value(*p);
                    let pt = pv.data()[*t];
                    let mut g = Tensor::zeros(pv.shape());
                    if pt > (-NEG_LOG_CLAMP).exp() {
                        g.data_mut()[*t] = -gy.item() / pt;
                    }
                    accum(&mut grads, *p, g);
                }
            }
        }
        Ok(out)
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}
