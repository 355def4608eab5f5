//! Parameter containers shared by the GSF block and the toy backbones.

use rand::Rng;

use crate::error::Result;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{Element, Tensor};

/// Anything holding named trainable tensors.
///
/// Names are dotted paths built from `prefix`; the same walk order is used
/// for binding onto a tape, for the optimizer and for weight files.
pub trait Parameterized<E: Element> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.len());
        n
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.visit_params(prefix, &mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Non-trainable state saved alongside the parameters.
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(String, &Tensor<E>)) {}

    /// Every normalization layer, with its name prefix.
    fn visit_norms_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut BatchNorm<E>)) {}

    /// Parameters followed by buffers.
    fn named_state(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut out = self.named_params(prefix);
        self.visit_buffers(prefix, &mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Folds the moments recorded on a training tape into the running
    /// moments of the matching layers.
    fn absorb_stats(&mut self, prefix: &str, stats: &[BatchStats]) {
        self.visit_norms_mut(prefix, &mut |name, bn| {
            if let Some(s) = stats.iter().find(|s| s.name == name) {
                bn.absorb(s);
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Batch normalization over the channel axis of `N×C×…` inputs.
///
/// On a training tape the batch moments are used and reported; otherwise
/// the running moments. `scale` and `offset` are the trainable part.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<E: Element = f32> {
    pub scale: Tensor<E>,
    pub offset: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
}

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running moments.
pub const BN_MOMENTUM: f64 = 0.1;

impl<E: Element> BatchNorm<E> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            scale: Tensor::ones(&[channels]),
            offset: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// The inference-time map as one per-channel (multiplier, addend) pair.
    pub fn folded(&self) -> (Vec<f64>, Vec<f64>) {
        let mut mul = Vec::with_capacity(self.channels());
        let mut add = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let k = self.scale.data()[c].as_f64() / (self.running_var.data()[c].as_f64() + BN_EPS).sqrt();
            mul.push(k);
            add.push(self.offset.data()[c].as_f64() - self.running_mean.data()[c].as_f64() * k);
        }
        (mul, add)
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var, prefix: &str) -> Result<Var> {
        let s = tape.param(join(prefix, "scale"), self.scale.clone());
        let o = tape.param(join(prefix, "offset"), self.offset.clone());
        let z = if tape.is_training() {
            let (z, mean, var) = tape.standardize(x, BN_EPS)?;
            tape.record_stats(BatchStats {
                name: prefix.to_string(),
                mean,
                var,
            });
            z
        } else {
            let c = self.channels();
            let inv: Vec<E> = self
                .running_var
                .data()
                .iter()
                .map(|v| E::from_f64(1.0 / (v.as_f64() + BN_EPS).sqrt()))
                .collect();
            let shift: Vec<E> = self
                .running_mean
                .data()
                .iter()
                .zip(&inv)
                .map(|(m, k)| E::from_f64(-m.as_f64() * k.as_f64()))
                .collect();
            let k = tape.constant(Tensor::from_vec(&[c], inv)?);
            let b = tape.constant(Tensor::from_vec(&[c], shift)?);
            tape.channel_affine(x, k, b)?
        };
        tape.channel_affine(z, s, o)
    }

    /// Blends observed batch moments into the running moments.
    pub fn absorb(&mut self, stats: &BatchStats) {
        let m = BN_MOMENTUM;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = E::from_f64((1.0 - m) * r.as_f64() + m * b);
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = E::from_f64((1.0 - m) * r.as_f64() + m * b);
        }
    }

    pub fn cast<F: Element>(&self) -> BatchNorm<F> {
        BatchNorm {
            scale: self.scale.cast(),
            offset: self.offset.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }
}

impl<E: Element> Parameterized<E> for BatchNorm<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(join(prefix, "scale"), &self.scale);
        f(join(prefix, "offset"), &self.offset);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(join(prefix, "scale"), &mut self.scale);
        f(join(prefix, "offset"), &mut self.offset);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_norms_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNorm<E>)) {
        f(prefix, self);
    }
}

/// Bias-free 2D convolution with square odd kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<E: Element = f32> {
    pub kernel: Tensor<E>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Element> Conv<E> {
    /// He-normal initialization.
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (c_in * k * k) as f64;
        Conv {
            kernel: Tensor::randn(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng),
            stride,
            pad: k / 2,
        }
    }

    pub fn c_in(&self) -> usize {
        self.kernel.dim(1)
    }

    pub fn c_out(&self) -> usize {
        self.kernel.dim(0)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dim(2)
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var, prefix: &str) -> Result<Var> {
        let k = tape.param(join(prefix, "kernel"), self.kernel.clone());
        tape.conv2d(x, k, self.stride, self.pad)
    }

    /// Output spatial extent for an input extent.
    pub fn out_extent(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel_size()) / self.stride + 1
    }
}

impl<E: Element> Parameterized<E> for Conv<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(join(prefix, "kernel"), &self.kernel);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(join(prefix, "kernel"), &mut self.kernel);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<E: Element = f32> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> Dense<E> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Dense {
            weight: Tensor::randn(&[outputs, inputs], (1.0 / inputs as f64).sqrt(), rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var, prefix: &str) -> Result<Var> {
        let w = tape.param(join(prefix, "weight"), self.weight.clone());
        let b = tape.param(join(prefix, "bias"), self.bias.clone());
        tape.linear(x, w, b)
    }
}

impl<E: Element> Parameterized<E> for Dense<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
