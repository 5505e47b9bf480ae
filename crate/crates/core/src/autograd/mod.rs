//! Tape-based reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! which is also a topological order. [`Tape::backward`] walks the tape in
//! reverse and returns the gradient of a scalar loss with respect to every
//! parameter that was read through [`Tape::param`]. Gradients of a node that
//! feeds several consumers accumulate.

mod check;
mod params;

pub use check::{grad_check, GradCheckFailure, GradCheckReport};
pub use params::{Param, ParamId, ParamSet};

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, BnMode, BnStats, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for an operation implemented outside this module.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; `backward` receives the input values, the forward output
/// and the upstream gradient, and returns one gradient per input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    Transpose(Var),
    ReduceMean(Var, usize),
    Concat(Vec<Var>, usize),
    SliceRows(Var, usize),
    Sum(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    SoftmaxCrossEntropy {
        scores: Var,
        label: usize,
        probs: Tensor,
    },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Output of a batch-norm node: the normalised value plus the statistics of
/// the batch it saw.
pub struct BnOutput {
    pub y: Var,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient for `id`, zero-filled when the parameter was not reached.
    pub fn get_or_zero(&self, id: ParamId, params: &ParamSet) -> Tensor {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.value(id).shape()))
    }

    /// Adds every gradient into the matching accumulator of `params`.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<()> {
        let mut ids: Vec<_> = self.grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            params.get_mut(id).grad.add_assign(&self.grads[&id])?;
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a parameter onto the tape. Repeated reads of the same parameter
    /// share one node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    /// Per-position linear map (kernel-size-1 convolution).
    pub fn position_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = tensor::position_linear(self.value(x), self.value(w))?;
        Ok(self.push(out, Op::MatMul(x, w)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = tensor::scale(self.value(a), s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = tensor::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = tensor::tanh(self.value(a));
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = tensor::relu(self.value(a));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = tensor::exp(self.value(a));
        self.push(out, Op::Exp(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = tensor::reshape(self.value(a), shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = tensor::reduce_mean(self.value(a), axis)?;
        Ok(self.push(out, Op::ReduceMean(a, axis)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = tensor::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = tensor::slice_rows(self.value(a), start, end)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Batch normalisation of `x: N×C`. Running statistics are not touched
    /// here; callers blend the returned batch statistics themselves.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &BnStats, mode: BnMode) -> Result<BnOutput> {
        let parts = tensor::batch_norm_parts(self.value(x), self.value(gamma), self.value(beta), stats, mode)?;
        let y = self.push(
            parts.y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat: parts.xhat,
                inv_std: parts.inv_std,
            },
        );
        Ok(BnOutput {
            y,
            batch_mean: parts.batch_mean,
            batch_var: parts.batch_var,
        })
    }

    /// Inverted dropout: elements are zeroed with probability `drop` and the
    /// survivors scaled by `1/(1-drop)`. The mask is stored on the tape.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, drop: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&drop) {
            return Err(Error::Config(format!("drop probability {drop} outside [0, 1)")));
        }
        let keep_scale = 1.0 / (1.0 - drop);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < drop { 0.0 } else { keep_scale })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    /// `-log softmax(scores)[label]` for a score vector of any shape with K
    /// elements.
    pub fn softmax_cross_entropy(&mut self, scores: Var, label: usize) -> Result<Var> {
        let s = self.value(scores);
        let k = s.len();
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        if !s.is_finite() {
            return Err(Error::NonFinite {
                op: "softmax_cross_entropy",
            });
        }
        let max = s.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - s.data()[label];
        let probs = Tensor::new(s.shape().to_vec(), s.data().iter().map(|v| (v - lse).exp()).collect())?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { scores, label, probs }))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), op))
    }

    /// Reverse pass from a scalar `loss`; d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::SliceRows(a, start) = node.op {
                // accumulate straight into the source rows
                let src = self.value(a);
                let n = src.len() / src.shape()[0];
                let acc = grads[a.0].get_or_insert_with(|| Tensor::zeros(src.shape()));
                for (d, v) in acc.data_mut()[start * n..start * n + g.len()].iter_mut().zip(g.data()) {
                    *d += v;
                }
                continue;
            }
            let contributions = self.local_grads(node, &g)?;
            if let Op::Param(id) = node.op {
                out.grads.insert(id, g);
                continue;
            }
            for (input, grad) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(out)
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let y = &node.value;
        let v = |var: Var| self.value(var);
        let grads = match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            &Op::MatMul(a, b) => vec![
                (a, tensor::matmul_nt(g, v(b))?),
                (b, tensor::matmul_tn(v(a), g)?),
            ],
            &Op::MatMulNt(a, b) => vec![(a, tensor::matmul(g, v(b))?), (b, tensor::matmul_tn(g, v(a))?)],
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![(a, g.clone()), (b, tensor::scale(g, -1.0))],
            &Op::Hadamard(a, b) => vec![
                (a, tensor::hadamard(g, v(b))?),
                (b, tensor::hadamard(g, v(a))?),
            ],
            &Op::Scale(a, s) => vec![(a, tensor::scale(g, s))],
            &Op::Sigmoid(a) => vec![(a, map2(g, y, |gv, yv| gv * yv * (1.0 - yv)))],
            &Op::Tanh(a) => vec![(a, map2(g, y, |gv, yv| gv * (1.0 - yv * yv)))],
            &Op::Relu(a) => vec![(a, map2(g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 }))],
            &Op::Exp(a) => vec![(a, tensor::hadamard(g, y)?)],
            &Op::SoftmaxRows(a) => {
                let (m, n) = y.dims2("softmax_rows")?;
                let mut dx = Vec::with_capacity(m * n);
                for i in 0..m {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                vec![(a, Tensor::new(vec![m, n], dx)?)]
            }
            &Op::Reshape(a) => vec![(a, tensor::reshape(g, v(a).shape())?)],
            &Op::Transpose(a) => vec![(a, tensor::transpose(g)?)],
            &Op::ReduceMean(a, axis) => {
                let shape = v(a).shape();
                let extent = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let inv = 1.0 / extent as f64;
                let mut dx = Vec::with_capacity(v(a).len());
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..extent {
                        dx.extend(src.iter().map(|s| s * inv));
                    }
                }
                vec![(a, Tensor::new(shape.to_vec(), dx)?)]
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let outer: usize = y.shape()[..axis].iter().product();
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let total = y.shape()[axis];
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let extent = v(p).shape()[axis];
                    let mut d = Vec::with_capacity(v(p).len());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + extent * inner]);
                    }
                    offset += extent;
                    res.push((p, Tensor::new(v(p).shape().to_vec(), d)?));
                }
                res
            }
            &Op::SliceRows(a, start) => {
                let (_, n) = v(a).dims2("slice_rows")?;
                let mut d = Tensor::zeros(v(a).shape());
                d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                vec![(a, d)]
            }
            &Op::Sum(a) => vec![(a, Tensor::full(v(a).shape(), g.data()[0]))],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            } => {
                let (rows, c) = xhat.dims2("batch_norm")?;
                let gam = v(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..rows {
                    for ch in 0..c {
                        let gv = g.data()[i * c + ch];
                        dgamma[ch] += gv * xhat.data()[i * c + ch];
                        dbeta[ch] += gv;
                    }
                }
                let mut dx = vec![0.0; rows * c];
                match mode {
                    BnMode::Infer => {
                        for (i, d) in dx.iter_mut().enumerate() {
                            let ch = i % c;
                            *d = g.data()[i] * gam[ch] * inv_std[ch];
                        }
                    }
                    BnMode::Train => {
                        // dgamma/dbeta double as the per-channel sums of
                        // dxhat·xhat and dxhat (up to the gamma factor).
                        let n = rows as f64;
                        for i in 0..rows {
                            for ch in 0..c {
                                let k = i * c + ch;
                                let dxhat = g.data()[k] * gam[ch];
                                dx[k] = inv_std[ch] / n
                                    * (n * dxhat - gam[ch] * dbeta[ch] - xhat.data()[k] * gam[ch] * dgamma[ch]);
                            }
                        }
                    }
                }
                let gshape = v(*gamma).shape().to_vec();
                vec![
                    (*x, Tensor::new(vec![rows, c], dx)?),
                    (*gamma, Tensor::new(gshape.clone(), dgamma)?),
                    (*beta, Tensor::new(gshape, dbeta)?),
                ]
            }
            Op::Dropout(a, mask) => {
                let d = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                vec![(*a, Tensor::new(g.shape().to_vec(), d)?)]
            }
            Op::SoftmaxCrossEntropy { scores, label, probs } => {
                let up = g.data()[0];
                let mut d: Vec<f64> = probs.data().iter().map(|p| p * up).collect();
                d[*label] -= up;
                vec![(*scores, Tensor::new(probs.shape().to_vec(), d)?)]
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| v(i)).collect();
                let grads = op.backward(&values, y, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Config(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        };
        Ok(grads)
    }
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}
