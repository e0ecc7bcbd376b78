//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward operation as a node holding its output value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients; only
//! first-order derivatives are supported.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result, TensorError};
use crate::ops::{self, Activation, ConvSpec, LstmWeights};
use crate::params::{GradStore, NetworkParams};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Prelu(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Var, Var),
    Gap(Var),
    Dense { x: Var, w: Var, b: Var },
    Narrow { x: Var, start: usize, len: usize },
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Parameter handles registered on a tape, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParameter(name.to_string()))
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Records a forward computation for later differentiation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    check_finite: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            check_finite: false,
        }
    }

    /// Fail any forward op whose output contains NaN or infinity.
    pub fn checked() -> Self {
        Self {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Signs of every ReLU/PReLU input, in recording order. Two passes with equal
    /// patterns lie in the same linear piece of those activations.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) | Op::Prelu(x, _) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input. No gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a named parameter; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: value.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        v
    }

    /// Registers every tensor of a parameter set.
    pub fn params(&mut self, params: &NetworkParams<T>) -> ParamVars {
        ParamVars(params.iter().map(|(name, t)| (name.to_string(), self.param(name, t))).collect())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), spec)?;
        self.push("conv2d", y, Op::Conv2d { x, w, b, spec }, &[x, w, b])
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = ops::conv_transpose2d(self.value(x), self.value(w), self.value(b), stride, padding)?;
        self.push("conv_transpose2d", y, Op::ConvTranspose2d { x, w, b, stride, padding }, &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "add", |p, q| p + q)?;
        self.push("add", y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "sub", |p, q| p - q)?;
        self.push("sub", y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "mul", |p, q| p * q)?;
        self.push("mul", y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let y = self.value(a).map(|v| v * f);
        self.push("scale", y, Op::Scale(a, factor), &[a])
    }

    /// ReLU when `slope` is `None`, PReLU with per-channel slopes otherwise.
    pub fn activation(&mut self, x: Var, kind: Activation, slope: Option<Var>) -> Result<Var> {
        let y = ops::activation(self.value(x), kind, slope.map(|s| self.value(s)))?;
        match (kind, slope) {
            (Activation::Prelu, Some(s)) => self.push("prelu", y, Op::Prelu(x, s), &[x, s]),
            _ => self.push("relu", y, Op::Relu(x), &[x]),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu, None)
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        self.activation(x, Activation::Prelu, Some(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(ops::sigmoid);
        self.push("sigmoid", y, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.tanh());
        self.push("tanh", y, Op::Tanh(x), &[x])
    }

    /// Concatenates two rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err("concat_channels", format!("[{n}, _, {h}, {w}]"), self.value(b).shape()));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let y = Tensor::from_vec(vec![n, ca + cb, h, w], data)?;
        self.push("concat_channels", y, Op::Concat(a, b), &[a, b])
    }

    pub fn pool_gap(&mut self, x: Var) -> Result<Var> {
        let y = ops::pool_gap(self.value(x))?;
        self.push("pool_gap", y, Op::Gap(x), &[x])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::dense(self.value(x), self.value(w), self.value(b))?;
        self.push("dense", y, Op::Dense { x, w, b }, &[x, w, b])
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("narrow")?;
        if start + len > cols || len == 0 {
            return Err(shape_err("narrow", format!("at least {} columns", start + len), self.value(x).shape()));
        }
        let src = self.value(x).data();
        let data = (0..rows).flat_map(|r| src[r * cols + start..r * cols + start + len].iter().copied()).collect();
        let y = Tensor::from_vec(vec![rows, len], data)?;
        self.push("narrow", y, Op::Narrow { x, start, len }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push("sum", y, Op::Sum(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err("mse", format!("{:?}", p.shape()), t.shape()));
        }
        let n = T::from_f64(p.len() as f64);
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        self.push("mse", Tensor::scalar(s / n), Op::Mse(pred, target), &[pred, target])
    }

    /// One LSTM step built from primitive ops (gate order i, f, g, o).
    /// `prefix` names the parameters `{prefix}.w_ih`, `{prefix}.w_hh`, `{prefix}.b`.
    pub fn lstm_step(&mut self, x: Var, h: Var, c: Var, params: &ParamVars, prefix: &str) -> Result<(Var, Var)> {
        let w_ih = params.get(&format!("{prefix}.w_ih"))?;
        let w_hh = params.get(&format!("{prefix}.w_hh"))?;
        let b = params.get(&format!("{prefix}.b"))?;
        let (_, hidden) = self.value(h).dims2("lstm_step")?;
        if self.value(c).shape() != self.value(h).shape() {
            return Err(shape_err("lstm_step", format!("cell {:?}", self.value(h).shape()), self.value(c).shape()));
        }
        if self.value(w_hh).shape() != [4 * hidden, hidden] {
            return Err(shape_err("lstm_step", format!("w_hh [{}, {hidden}]", 4 * hidden), self.value(w_hh).shape()));
        }
        let zero = self.input(Tensor::zeros(vec![4 * hidden]));
        let gx = self.dense(x, w_ih, b)?;
        let gh = self.dense(h, w_hh, zero)?;
        let gates = self.add(gx, gh)?;
        let i = self.narrow(gates, 0, hidden)?;
        let f = self.narrow(gates, hidden, hidden)?;
        let g = self.narrow(gates, 2 * hidden, hidden)?;
        let o = self.narrow(gates, 3 * hidden, hidden)?;
        let (i, f, g, o) = (self.sigmoid(i)?, self.sigmoid(f)?, self.tanh(g)?, self.sigmoid(o)?);
        let keep = self.mul(f, c)?;
        let write = self.mul(i, g)?;
        let c_next = self.add(keep, write)?;
        let squashed = self.tanh(c_next)?;
        let h_next = self.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Backpropagates from a scalar `loss`. Every registered parameter gets an entry;
    /// parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<GradStore<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::NoGraph);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(&node.op, &node.value, &g)?;
            for (v, d) in contributions {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot => *slot = Some(d),
                }
            }
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut store = GradStore::default();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape().to_vec()));
            store.insert(name.clone(), g);
        }
        Ok(store)
    }

    fn node_backward(&self, op: &Op, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = ops::conv2d_backward(self.value(x), self.value(w), spec, g)?;
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::ConvTranspose2d { x, w, b, stride, padding } => {
                let (dx, dw, db) = ops::conv_transpose2d_backward(self.value(x), self.value(w), stride, padding, g)?;
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(b), "mul", |p, q| p * q)?;
                let db = g.zip_map(self.value(a), "mul", |p, q| p * q)?;
                vec![(a, da), (b, db)]
            }
            Op::Scale(a, f) => {
                let f = T::from_f64(f);
                vec![(a, g.map(|v| v * f))]
            }
            Op::Relu(x) => vec![(x, g.zip_map(self.value(x), "relu", |d, v| if v > T::zero() { d } else { T::zero() })?)],
            Op::Prelu(x, s) => {
                let (dx, ds) = ops::prelu_backward(self.value(x), self.value(s), g)?;
                vec![(x, dx), (s, ds)]
            }
            Op::Sigmoid(x) => vec![(x, g.zip_map(out, "sigmoid", |d, y| d * y * (T::one() - y))?)],
            Op::Tanh(x) => vec![(x, g.zip_map(out, "tanh", |d, y| d * (T::one() - y * y))?)],
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
                let cb = self.value(b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    db.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                vec![
                    (a, Tensor::from_vec(self.value(a).shape().to_vec(), da)?),
                    (b, Tensor::from_vec(self.value(b).shape().to_vec(), db)?),
                ]
            }
            Op::Gap(x) => vec![(x, ops::pool_gap_backward(self.value(x).shape(), g)?)],
            Op::Dense { x, w, b } => {
                let (dx, dw, db) = ops::dense_backward(self.value(x), self.value(w), g)?;
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::Narrow { x, start, len } => {
                let (rows, cols) = self.value(x).dims2("narrow")?;
                let mut dx = Tensor::zeros(vec![rows, cols]);
                for r in 0..rows {
                    dx.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![(x, dx)]
            }
            Op::Sum(x) => vec![(x, Tensor::full(self.value(x).shape().to_vec(), g.data()[0]))],
            Op::Mse(p, t) => {
                let scale = g.data()[0] * T::from_f64(2.0 / self.value(p).len() as f64);
                let dp = self.value(p).zip_map(self.value(t), "mse", |a, b| (a - b) * scale)?;
                let dt = dp.map(|v| -v);
                vec![(p, dp), (t, dt)]
            }
        })
    }
}

/// Tape-free LSTM step over a parameter set, for inference paths.
pub fn lstm_step_params<T: Float>(
    x: &Tensor<T>,
    h: &Tensor<T>,
    c: &Tensor<T>,
    params: &NetworkParams<T>,
    prefix: &str,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let weights = LstmWeights {
        w_ih: params.get(&format!("{prefix}.w_ih"))?,
        w_hh: params.get(&format!("{prefix}.w_hh"))?,
        bias: params.get(&format!("{prefix}.b"))?,
    };
    ops::lstm_step(x, h, c, weights)
}
