//! Layer primitives shared by every model: affine maps, gated tanh units,
//! the LSTM cell, a two-layer ReLU MLP, dropout, and the scalar losses.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var, NEG_LOG_CLAMP};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Glorot-uniform matrix: `U(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("glorot shape")
}

/// `y = W x + b` with `W: [out × in]`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(out_dim, in_dim, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Works on a vector `[in]` or row-wise on a matrix `[N × in]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Gated tanh unit: `tanh(W₁x + b₁) ⊙ σ(W₂x + b₂)`.
#[derive(Clone, Debug)]
pub struct Gtu {
    pub value: Affine,
    pub gate: Affine,
}

impl Gtu {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            value: Affine::new(store, &format!("{name}.value"), in_dim, out_dim, rng)?,
            gate: Affine::new(store, &format!("{name}.gate"), in_dim, out_dim, rng)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.value.out_dim
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.value.forward(g, x)?;
        let a = g.tanh(a);
        let b = self.gate.forward(g, x)?;
        let b = g.sigmoid(b);
        g.mul(a, b)
    }
}

/// Standard LSTM cell with input, forget and output gates.
///
/// Gate pre-activations are stacked as `[i; f; g; o]` in one `[4h × ·]` block.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h4 = 4 * hidden_dim;
        Ok(Self {
            input_weight: store.add(format!("{name}.w_input"), glorot_uniform(h4, input_dim, rng))?,
            hidden_weight: store.add(format!("{name}.w_hidden"), glorot_uniform(h4, hidden_dim, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[h4]))?,
            input_dim,
            hidden_dim,
        })
    }

    /// One step; returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let h = self.hidden_dim;
        if g.value(h_prev).len() != h || g.value(c_prev).len() != h {
            return Err(crate::error::shape_err(
                "lstm_step",
                format!("state size {} / {} for hidden {h}", g.value(h_prev).len(), g.value(c_prev).len()),
            ));
        }
        let wx = g.param(self.input_weight);
        let wh = g.param(self.hidden_weight);
        let b = g.param(self.bias);
        let zx = g.linear(x, wx, Some(b))?;
        let zh = g.linear(h_prev, wh, None)?;
        let z = g.add(zx, zh)?;
        let idx = |k: usize| (k * h..(k + 1) * h).collect::<Vec<_>>();
        let i = g.gather(z, &idx(0))?;
        let f = g.gather(z, &idx(1))?;
        let cand = g.gather(z, &idx(2))?;
        let o = g.gather(z, &idx(3))?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h_next = g.mul(o, tc)?;
        Ok((h_next, c))
    }

    /// Runs the cell over a sequence from a zero state and returns the final hidden state.
    pub fn run(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Empty("lstm input sequence"));
        }
        let mut h = g.constant(Tensor::zeros(&[self.hidden_dim]));
        let mut c = g.constant(Tensor::zeros(&[self.hidden_dim]));
        for &x in inputs {
            let (hn, cn) = self.step(g, x, h, c)?;
            h = hn;
            c = cn;
        }
        Ok(h)
    }
}

/// Two affine layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub hidden: Affine,
    pub output: Affine,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Affine::new(store, &format!("{name}.hidden"), in_dim, hidden_dim, rng)?,
            output: Affine::new(store, &format!("{name}.output"), hidden_dim, out_dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

/// Inverted dropout. Identity when not training or when `rate == 0`.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    g.mul_const(x, Tensor::new(shape, mask)?)
}

/// Huber loss of a non-negative error magnitude.
pub fn huber(e: f64) -> Result<f64> {
    if e < 0.0 || e.is_nan() {
        return Err(Error::InvalidArgument(format!("huber expects e >= 0, got {e}")));
    }
    Ok(if e <= 1.0 { 0.5 * e * e } else { e - 0.5 })
}

/// `−log p[target]`, clamped at 50 when `p[target]` underflows.
pub fn cross_entropy(p: &[f64], target: usize) -> Result<f64> {
    let pt = *p.get(target).ok_or_else(|| {
        Error::InvalidArgument(format!("target {target} out of range for {} classes", p.len()))
    })?;
    Ok(if pt > (-NEG_LOG_CLAMP).exp() {
        -pt.ln()
    } else {
        NEG_LOG_CLAMP
    })
}
