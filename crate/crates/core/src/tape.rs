//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every op evaluates eagerly, stores its output on the tape and returns a
//! [`Var`] handle. [`Tape::backward`] walks the record in reverse and returns
//! gradients for every trainable leaf. The tape also tallies the
//! multiply-accumulate cost of each recorded op (see [`Tape::macs`]).

use crate::error::{dim_err, GsfError, Result};
use crate::ops::{self, ShiftDirection};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    Conv3d {
        x: Var,
        k: Var,
        pad: (usize, usize, usize),
    },
    PoolSpatial(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AffineCombine {
        w: Var,
        a: Var,
        b: Var,
    },
    Scale(Var, f64),
    ChannelAffine {
        x: Var,
        scale: Var,
        offset: Var,
    },
    Standardize {
        x: Var,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Shift(Var, ShiftDirection),
    MeanAxis(Var, usize),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<E> {
    value: Tensor<E>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    params: Vec<(String, Var)>,
    macs: u64,
    training: bool,
    stats: Vec<BatchStats>,
}

/// Per-channel batch moments observed by a normalization layer on a
/// training tape.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradients of one backward pass, indexed by leaf.
#[derive(Debug)]
pub struct Gradients<E: Element = f32> {
    grads: Vec<Option<Tensor<E>>>,
    params: Vec<(String, Var)>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter; zeros are never elided, so every
    /// parameter reachable from the loss is present.
    pub fn named(&self, name: &str) -> Option<&Tensor<E>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|&(_, v)| self.get(v))
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, Option<&Tensor<E>>)> {
        self.params.iter().map(|(n, v)| (n.as_str(), self.get(*v)))
    }
}

impl<E: Element> Tape<E> {
    /// An inference tape: normalization layers use their running moments.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            macs: 0,
            training: false,
            stats: Vec::new(),
        }
    }

    /// A training tape: normalization layers use batch moments and report
    /// them through [`Tape::batch_stats`].
    pub fn training() -> Self {
        Tape {
            training: true,
            ..Tape::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn record_stats(&mut self, stats: BatchStats) {
        self.stats.push(stats);
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by all ops recorded so far.
    ///
    /// Convolutions and the dense layer count one per weight tap per output;
    /// add, sub and hadamard count one per output element; `affine_combine`
    /// counts three. Activations, normalization, pooling and data movement
    /// are free.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<E>, op: Op, op_name: &str) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            other => inputs(other).iter().any(|&v| self.needs_grad(v)),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor<E>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named trainable leaf; its gradient can be looked up by name.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<E>) -> Var {
        let v = self.var(value);
        self.params.push((name.into(), v));
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ops::Conv2dGeometry::new(self.shape(x), self.shape(k), stride, pad)?;
        let y = ops::conv2d(self.value(x), self.value(k), stride, pad)?;
        self.macs += geom.macs();
        self.push(y, Op::Conv2d { x, k, stride, pad }, "conv2d")
    }

    pub fn conv3d_grouped_single_plane(&mut self, x: Var, k: Var, pad: (usize, usize, usize)) -> Result<Var> {
        let geom = ops::Conv3dGeometry::new(self.shape(x), self.shape(k), pad)?;
        let y = ops::conv3d_grouped_single_plane(self.value(x), self.value(k), pad)?;
        self.macs += geom.macs();
        self.push(y, Op::Conv3d { x, k, pad }, "conv3d")
    }

    pub fn avg_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let y = ops::avg_pool_spatial(self.value(x))?;
        self.push(y, Op::PoolSpatial(x), "avg_pool_spatial")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let y = ops::tanh(self.value(x));
        self.push(y, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x), "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        self.macs += y.len() as u64;
        self.push(y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::sub(self.value(a), self.value(b))?;
        self.macs += y.len() as u64;
        self.push(y, Op::Sub(a, b), "sub")
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::hadamard(self.value(a), self.value(b))?;
        self.macs += y.len() as u64;
        self.push(y, Op::Hadamard(a, b), "hadamard")
    }

    /// `w ⊙ a + (1 − w) ⊙ b` with `w` broadcast.
    pub fn affine_combine(&mut self, w: Var, a: Var, b: Var) -> Result<Var> {
        let y = ops::affine_combine(self.value(w), self.value(a), self.value(b))?;
        self.macs += 3 * y.len() as u64;
        self.push(y, Op::AffineCombine { w, a, b }, "affine_combine")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = E::from_f64(c);
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale(x, c), "scale")
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, offset: Var) -> Result<Var> {
        let y = ops::channel_affine(self.value(x), self.value(scale), self.value(offset))?;
        self.push(y, Op::ChannelAffine { x, scale, offset }, "channel_affine")
    }

    /// Per-channel standardization with this batch's moments; returns the
    /// output together with (mean, biased variance).
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (mean, var) = ops::channel_moments(self.value(x))?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = ops::channel_standardize(self.value(x), &mean, &inv_std)?;
        let v = self.push(y, Op::Standardize { x, inv_std }, "standardize")?;
        Ok((v, mean, var))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.macs += (self.shape(x)[0] * self.shape(w)[0] * self.shape(w)[1]) as u64;
        self.push(y, Op::Linear { x, w, b }, "linear")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push(y, Op::Reshape(x), "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = ops::permute(self.value(x), perm)?;
        self.push(y, Op::Permute(x, perm.to_vec()), "permute")
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_axis(self.value(x), axis, start, len)?;
        self.push(y, Op::Slice { x, axis, start }, "slice")
    }

    pub fn concat_axis(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_axis(&values, axis)?;
        self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    pub fn shift_time(&mut self, x: Var, direction: ShiftDirection) -> Result<Var> {
        let y = ops::shift_time(self.value(x), direction)?;
        self.push(y, Op::Shift(x, direction), "shift")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::mean_axis(self.value(x), axis)?;
        self.push(y, Op::MeanAxis(x, axis), "mean_axis")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(E::from_f64(self.value(x).sum()));
        self.push(y, Op::SumAll(x), "sum")
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf
    /// it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.value(loss).len() != 1 {
            return Err(GsfError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), E::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.vjp(&node.op, &node.value, &g)? {
                if !self.needs_grad(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        // Keep gradients only for leaves.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            } else if node.needs_grad && grads[i].is_none() && i <= loss.0 {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn vjp(&self, op: &Op, out: &Tensor<E>, g: &Tensor<E>) -> Result<Vec<(Var, Tensor<E>)>> {
        let v = |x: Var| self.value(x);
        Ok(match op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, k, stride, pad } => {
                let (dx, dk) = ops::conv2d_backward(v(*x), v(*k), g, *stride, *pad)?;
                vec![(*x, dx), (*k, dk)]
            }
            Op::Conv3d { x, k, pad } => {
                let (dx, dk) = ops::conv3d_grouped_single_plane_backward(v(*x), v(*k), g, *pad)?;
                vec![(*x, dx), (*k, dk)]
            }
            Op::PoolSpatial(x) => vec![(*x, ops::avg_pool_spatial_backward(g, self.shape(*x))?)],
            Op::Tanh(x) => {
                let d = zip_map(out, g, |y, gv| (E::one() - y * y) * gv)?;
                vec![(*x, d)]
            }
            Op::Sigmoid(x) => {
                let d = zip_map(out, g, |y, gv| y * (E::one() - y) * gv)?;
                vec![(*x, d)]
            }
            Op::Relu(x) => {
                let d = zip_map(v(*x), g, |xv, gv| if xv > E::zero() { gv } else { E::zero() })?;
                vec![(*x, d)]
            }
            Op::Add(a, b) => vec![
                (*a, ops::sum_to_shape(g, self.shape(*a))?),
                (*b, ops::sum_to_shape(g, self.shape(*b))?),
            ],
            Op::Sub(a, b) => {
                let neg = g.map(|x| -x);
                vec![
                    (*a, ops::sum_to_shape(g, self.shape(*a))?),
                    (*b, ops::sum_to_shape(&neg, self.shape(*b))?),
                ]
            }
            Op::Hadamard(a, b) => {
                let ga = ops::hadamard(g, v(*b))?;
                let gb = ops::hadamard(g, v(*a))?;
                vec![
                    (*a, ops::sum_to_shape(&ga, self.shape(*a))?),
                    (*b, ops::sum_to_shape(&gb, self.shape(*b))?),
                ]
            }
            Op::AffineCombine { w, a, b } => {
                let (gw, ga, gb) = ops::affine_combine_backward(v(*w), v(*a), v(*b), g)?;
                vec![(*w, gw), (*a, ga), (*b, gb)]
            }
            Op::Scale(x, c) => {
                let k = E::from_f64(*c);
                vec![(*x, g.map(|gv| gv * k))]
            }
            Op::ChannelAffine { x, scale, offset } => {
                let (gx, gs, go) = ops::channel_affine_backward(v(*x), v(*scale), g)?;
                vec![(*x, gx), (*scale, gs), (*offset, go)]
            }
            Op::Standardize { x, inv_std } => {
                vec![(*x, ops::channel_standardize_backward(out, inv_std, g)?)]
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = ops::linear_backward(v(*x), v(*w), g)?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(self.shape(*x))?)],
            Op::Permute(x, perm) => vec![(*x, ops::permute(g, &ops::inverse_permutation(perm))?)],
            Op::Slice { x, axis, start } => {
                vec![(*x, ops::slice_axis_backward(g, self.shape(*x), *axis, *start)?)]
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    out.push((p, ops::slice_axis(g, *axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Shift(x, dir) => vec![(*x, ops::shift_time(g, dir.reversed())?)],
            Op::MeanAxis(x, axis) => vec![(*x, ops::mean_axis_backward(g, self.shape(*x), *axis)?)],
            Op::SumAll(x) => vec![(*x, Tensor::full(self.shape(*x), g.data()[0]))],
            Op::CrossEntropy { logits, labels, probs } => vec![(
                *logits,
                ops::softmax_cross_entropy_backward(probs, labels, self.shape(*logits), g.data()[0].as_f64())?,
            )],
        })
    }
}

fn zip_map<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return dim_err("gradient shape mismatch");
    }
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Conv2d { x, k, .. } | Op::Conv3d { x, k, .. } => vec![*x, *k],
        Op::PoolSpatial(x)
        | Op::Tanh(x)
        | Op::Sigmoid(x)
        | Op::Relu(x)
        | Op::Scale(x, _)
        | Op::Reshape(x)
        | Op::Permute(x, _)
        | Op::Slice { x, .. }
        | Op::Shift(x, _)
        | Op::MeanAxis(x, _)
        | Op::SumAll(x)
        | Op::Standardize { x, .. } => vec![*x],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) => vec![*a, *b],
        Op::AffineCombine { w, a, b } => vec![*w, *a, *b],
        Op::ChannelAffine { x, scale, offset } => vec![*x, *scale, *offset],
        Op::Linear { x, w, b } => vec![*x, *w, *b],
        Op::Concat { parts, .. } => parts.clone(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = tape.sum_all(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::<f64>::new();
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = tape.var(Tensor::from_vec(&[4], data.clone()).unwrap());
        let sq = tape.hadamard(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.var(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(GsfError::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let x = tape.param("x", Tensor::ones(&[2]));
        let y = tape.hadamard(c, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.named("x").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let unused = tape.param("unused", Tensor::ones(&[2]));
        let x = tape.param("x", Tensor::ones(&[2]));
        let loss = tape.sum_all(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1], f32::MAX));
        assert!(matches!(tape.add(x, x), Err(GsfError::Numeric(_))));
    }

    #[test]
    fn mac_tally_counts_conv_and_elementwise() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::ones(&[3, 2, 3, 3]));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(tape.macs(), 3 * 16 * 2 * 9);
        let _ = tape.hadamard(y, y).unwrap();
        assert_eq!(tape.macs(), 3 * 16 * 2 * 9 + 48);
    }
}
