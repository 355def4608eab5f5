//! The Gate-Shift-Fuse block.
//!
//! The leading `C_g` channels of a `B×C×T×H×W` input are split into two equal
//! groups. Each group is multiplied by a tanh gate plane produced by a
//! single-output 3×3×3 convolution over the group; the gated part is shifted
//! one frame in time (group 1 reads the next frame, group 2 the previous one)
//! and blended with the ungated residual using per-(channel, frame) sigmoid
//! weights computed from spatially pooled features. Channels past `C_g` are
//! copied through untouched.
//!
//! Fixed gate values and plain summation replace the learned gate and fusion
//! for the degenerate variants: gate 0 with summation is the identity, gate
//! +1 a pure group shift, gate −1 feature differencing.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::error::{config_err, dim_err, GsfError, Result};
use crate::layers::{join, BatchNorm, Parameterized};
use crate::ops::{self, ShiftDirection};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateMode {
    Learned,
    /// Constant gate +1.
    Positive,
    /// Constant gate −1.
    Negative,
    /// Constant gate 0.
    Zero,
}

impl GateMode {
    pub fn fixed_value(self) -> Option<f64> {
        match self {
            GateMode::Learned => None,
            GateMode::Positive => Some(1.0),
            GateMode::Negative => Some(-1.0),
            GateMode::Zero => Some(0.0),
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Learned => "learned",
            GateMode::Positive => "+1",
            GateMode::Negative => "-1",
            GateMode::Zero => "0",
        })
    }
}

impl FromStr for GateMode {
    type Err = GsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(GateMode::Learned),
            "+1" | "1" => Ok(GateMode::Positive),
            "-1" => Ok(GateMode::Negative),
            "0" => Ok(GateMode::Zero),
            other => config_err(format!("unknown gate mode `{other}` (learned, +1, -1, 0)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Learned,
    Sum,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Learned => "learned",
            FusionMode::Sum => "sum",
        })
    }
}

impl FromStr for FusionMode {
    type Err = GsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(FusionMode::Learned),
            "sum" => Ok(FusionMode::Sum),
            other => config_err(format!("unknown fusion mode `{other}` (learned, sum)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GsfConfig {
    pub channels_in: usize,
    /// Fraction of the leading channels that are processed.
    pub fraction: f64,
    pub gate_mode: GateMode,
    pub fusion_mode: FusionMode,
    /// Apply a per-channel affine map and rectifier to the slab before the
    /// gating convolution. The gated product still uses the raw slab.
    pub pre_gate_norm: bool,
}

impl GsfConfig {
    pub fn new(channels_in: usize) -> Self {
        GsfConfig {
            channels_in,
            fraction: 1.0,
            gate_mode: GateMode::Learned,
            fusion_mode: FusionMode::Learned,
            pre_gate_norm: true,
        }
    }

    pub fn with_fraction(mut self, fraction: f64) -> Self {
        self.fraction = fraction;
        self
    }

    pub fn with_modes(mut self, gate: GateMode, fusion: FusionMode) -> Self {
        self.gate_mode = gate;
        self.fusion_mode = fusion;
        self
    }

    pub fn with_pre_gate_norm(mut self, on: bool) -> Self {
        self.pre_gate_norm = on;
        self
    }

    /// Number of processed channels `C_g`, rounded down to an even count.
    pub fn processed_channels(&self) -> usize {
        processed_channels(self.channels_in, self.fraction)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return config_err(format!("fraction {} must lie in (0, 1]", self.fraction));
        }
        if self.processed_channels() < 2 {
            return config_err(format!(
                "fraction {} of {} channels leaves fewer than 2 processed channels",
                self.fraction, self.channels_in
            ));
        }
        Ok(())
    }
}

/// `C_g` for a site with `channels` channels: `fraction · channels` rounded
/// down to an even number.
pub fn processed_channels(channels: usize, fraction: f64) -> usize {
    let raw = (fraction * channels as f64 + 1e-9).floor() as usize;
    raw.min(channels) / 2 * 2
}

/// Stages of one forward pass, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    PreProcessing,
    GateComputing,
    Gating,
    Shifting,
    FusionWeightComputing,
    Fusion,
    PostProcessing,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::PreProcessing,
        Stage::GateComputing,
        Stage::Gating,
        Stage::Shifting,
        Stage::FusionWeightComputing,
        Stage::Fusion,
        Stage::PostProcessing,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::PreProcessing => "pre-processing",
            Stage::GateComputing => "gate computing",
            Stage::Gating => "gating",
            Stage::Shifting => "shifting",
            Stage::FusionWeightComputing => "fusion weight computing",
            Stage::Fusion => "fusion",
            Stage::PostProcessing => "post-processing",
        }
    }
}

/// Accumulates wall-clock time per [`Stage`].
#[derive(Clone, Debug)]
pub struct StageClock {
    last: Instant,
    totals: [Duration; 7],
}

impl Default for StageClock {
    fn default() -> Self {
        Self::new()
    }
}

impl StageClock {
    pub fn new() -> Self {
        StageClock {
            last: Instant::now(),
            totals: [Duration::ZERO; 7],
        }
    }

    pub fn restart(&mut self) {
        self.last = Instant::now();
    }

    /// Charges the time since the previous lap to `stage`.
    pub fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        let i = Stage::ALL.iter().position(|&s| s == stage).unwrap_or(0);
        self.totals[i] += now - self.last;
        self.last = now;
    }

    pub fn total(&self, stage: Stage) -> Duration {
        let i = Stage::ALL.iter().position(|&s| s == stage).unwrap_or(0);
        self.totals[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GsfModule<E: Element = f32> {
    config: GsfConfig,
    /// One `1×(C_g/2)×3×3×3` kernel per group.
    gate_kernels: Option<[Tensor<E>; 2]>,
    /// One `1×2×3×3` kernel per group.
    fusion_kernels: Option<[Tensor<E>; 2]>,
    norm: Option<BatchNorm<E>>,
}

impl<E: Element> GsfModule<E> {
    /// Builds a module with all kernels zero, so that a freshly inserted
    /// block computes `0.5 · X` (learned fusion) or exactly `X` (sum fusion).
    pub fn new(config: GsfConfig) -> Result<Self> {
        config.validate()?;
        let cg = config.processed_channels();
        let gate_kernels = (config.gate_mode == GateMode::Learned).then(|| {
            [
                Tensor::zeros(&[1, cg / 2, 3, 3, 3]),
                Tensor::zeros(&[1, cg / 2, 3, 3, 3]),
            ]
        });
        let fusion_kernels = (config.fusion_mode == FusionMode::Learned)
            .then(|| [Tensor::zeros(&[1, 2, 3, 3]), Tensor::zeros(&[1, 2, 3, 3])]);
        let norm = (config.pre_gate_norm && config.gate_mode == GateMode::Learned).then(|| BatchNorm::new(cg));
        Ok(GsfModule {
            config,
            gate_kernels,
            fusion_kernels,
            norm,
        })
    }

    /// Builds a module with normally distributed kernels and, if present,
    /// a randomly perturbed normalization.
    pub fn random<R: Rng + ?Sized>(config: GsfConfig, std: f64, rng: &mut R) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.visit_params_mut("", &mut |name, t| {
            let shape = t.shape().to_vec();
            *t = if name.ends_with("scale") {
                Tensor::uniform(&shape, 0.5, 1.5, rng)
            } else {
                Tensor::randn(&shape, std, rng)
            };
        });
        if let Some(n) = &mut m.norm {
            n.running_mean = Tensor::randn(&[n.channels()], std, rng);
            n.running_var = Tensor::uniform(&[n.channels()], 0.5, 1.5, rng);
        }
        Ok(m)
    }

    pub fn config(&self) -> &GsfConfig {
        &self.config
    }

    pub fn gate_kernel(&self, group: usize) -> Option<&Tensor<E>> {
        self.gate_kernels.as_ref().map(|k| &k[group])
    }

    pub fn fusion_kernel(&self, group: usize) -> Option<&Tensor<E>> {
        self.fusion_kernels.as_ref().map(|k| &k[group])
    }

    pub fn norm(&self) -> Option<&BatchNorm<E>> {
        self.norm.as_ref()
    }

    pub fn norm_mut(&mut self) -> Option<&mut BatchNorm<E>> {
        self.norm.as_mut()
    }

    pub fn set_gate_kernel(&mut self, group: usize, kernel: Tensor<E>) -> Result<()> {
        let cg = self.config.processed_channels();
        match &mut self.gate_kernels {
            None => Err(GsfError::Usage("module has no learned gate".into())),
            Some(_) if kernel.shape() != [1, cg / 2, 3, 3, 3] => dim_err(format!(
                "gate kernel must be [1, {}, 3, 3, 3], got {:?}",
                cg / 2,
                kernel.shape()
            )),
            Some(k) => {
                k[group] = kernel;
                Ok(())
            }
        }
    }

    pub fn set_fusion_kernel(&mut self, group: usize, kernel: Tensor<E>) -> Result<()> {
        match &mut self.fusion_kernels {
            None => Err(GsfError::Usage("module has no learned fusion".into())),
            Some(_) if kernel.shape() != [1, 2, 3, 3] => {
                dim_err(format!("fusion kernel must be [1, 2, 3, 3], got {:?}", kernel.shape()))
            }
            Some(k) => {
                k[group] = kernel;
                Ok(())
            }
        }
    }

    pub fn cast<F: Element>(&self) -> GsfModule<F> {
        GsfModule {
            config: self.config,
            gate_kernels: self.gate_kernels.as_ref().map(|[a, b]| [a.cast(), b.cast()]),
            fusion_kernels: self.fusion_kernels.as_ref().map(|[a, b]| [a.cast(), b.cast()]),
            norm: self.norm.as_ref().map(BatchNorm::cast),
        }
    }

    /// Gating and fusion kernel scalars, excluding normalization.
    pub fn kernel_param_count(&self) -> usize {
        let gate: usize = self.gate_kernels.iter().flatten().map(Tensor::len).sum();
        let fusion: usize = self.fusion_kernels.iter().flatten().map(Tensor::len).sum();
        gate + fusion
    }

    pub fn norm_param_count(&self) -> usize {
        self.norm.as_ref().map_or(0, |n| 2 * n.channels())
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var, prefix: &str) -> Result<Var> {
        self.forward_staged(tape, x, prefix, None)
    }

    /// [`forward`](Self::forward) with optional per-stage timing.
    pub fn forward_staged(
        &self,
        tape: &mut Tape<E>,
        x: Var,
        prefix: &str,
        mut clock: Option<&mut StageClock>,
    ) -> Result<Var> {
        let mut lap = |stage| {
            if let Some(c) = clock.as_deref_mut() {
                c.lap(stage);
            }
        };
        let shape = tape.shape(x).to_vec();
        if shape.len() != 5 {
            return dim_err(format!("GSF expects B×C×T×H×W input, got {shape:?}"));
        }
        if shape[1] != self.config.channels_in {
            return config_err(format!(
                "GSF configured for {} channels, input has {}",
                self.config.channels_in, shape[1]
            ));
        }
        if shape[2] == 0 {
            return dim_err("GSF input has no frames");
        }
        let c = shape[1];
        let cg = self.config.processed_channels();
        let half = cg / 2;

        // Pre-processing
        let slab = if cg < c { tape.slice_axis(x, 1, 0, cg)? } else { x };
        let gate_input = match &self.norm {
            Some(norm) => {
                let n = norm.forward(tape, slab, &join(prefix, "norm"))?;
                Some(tape.relu(n)?)
            }
            None => None,
        };
        let x1 = tape.slice_axis(slab, 1, 0, half)?;
        let x2 = tape.slice_axis(slab, 1, half, half)?;
        lap(Stage::PreProcessing);

        // Gate computing and gating
        let (y1, y2) = match (&self.gate_kernels, self.config.gate_mode.fixed_value()) {
            (Some([k1, k2]), None) => {
                let k1 = tape.param(join(prefix, "gate1"), k1.clone());
                let k2 = tape.param(join(prefix, "gate2"), k2.clone());
                let k = tape.concat_axis(&[k1, k2], 0)?;
                let conv = tape.conv3d_grouped_single_plane(gate_input.unwrap_or(slab), k, (1, 1, 1))?;
                let gates = tape.tanh(conv)?;
                lap(Stage::GateComputing);
                let g1 = tape.slice_axis(gates, 1, 0, 1)?;
                let g2 = tape.slice_axis(gates, 1, 1, 1)?;
                (tape.hadamard(g1, x1)?, tape.hadamard(g2, x2)?)
            }
            (_, Some(value)) => {
                lap(Stage::GateComputing);
                (tape.scale(x1, value)?, tape.scale(x2, value)?)
            }
            (None, None) => unreachable!("learned gate without kernels"),
        };
        let r1 = tape.sub(x1, y1)?;
        let r2 = tape.sub(x2, y2)?;
        lap(Stage::Gating);

        let ys1 = tape.shift_time(y1, ShiftDirection::Forward)?;
        let ys2 = tape.shift_time(y2, ShiftDirection::Backward)?;
        lap(Stage::Shifting);

        let (z1, z2) = match &self.fusion_kernels {
            Some([f1, f2]) => {
                let f1 = tape.param(join(prefix, "fuse1"), f1.clone());
                let f2 = tape.param(join(prefix, "fuse2"), f2.clone());
                let w1 = fusion_weight_map(tape, f1, ys1, r1)?;
                let w2 = fusion_weight_map(tape, f2, ys2, r2)?;
                lap(Stage::FusionWeightComputing);
                let z1 = tape.affine_combine(w1, ys1, r1)?;
                let z2 = tape.affine_combine(w2, ys2, r2)?;
                (z1, z2)
            }
            None => {
                lap(Stage::FusionWeightComputing);
                (tape.add(ys1, r1)?, tape.add(ys2, r2)?)
            }
        };
        lap(Stage::Fusion);

        let out = if cg < c {
            let rest = tape.slice_axis(x, 1, cg, c - cg)?;
            tape.concat_axis(&[z1, z2, rest], 1)?
        } else {
            tape.concat_axis(&[z1, z2], 1)?
        };
        lap(Stage::PostProcessing);
        Ok(out)
    }

    /// Inference-only forward on a plain tensor.
    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv, "gsf")?;
        Ok(tape.value(y).clone())
    }

    /// Gate planes `B×2×T×H×W` for a processed slab `B×C_g×T×H×W`.
    pub fn gate_maps(&self, slab: &Tensor<E>) -> Result<Tensor<E>> {
        let Some([k1, k2]) = &self.gate_kernels else {
            return Err(GsfError::Usage(format!(
                "gate maps requested but gate mode is {}",
                self.config.gate_mode
            )));
        };
        let cg = self.config.processed_channels();
        if slab.rank() != 5 || slab.dim(1) != cg {
            return dim_err(format!("gate maps expect B×{cg}×T×H×W, got {:?}", slab.shape()));
        }
        let input = match &self.norm {
            Some(n) => {
                let mut tape = Tape::new();
                let x = tape.constant(slab.clone());
                let z = n.forward(&mut tape, x, "norm")?;
                ops::relu(tape.value(z))
            }
            None => slab.clone(),
        };
        let k = ops::concat_axis(&[k1, k2], 0)?;
        Ok(ops::tanh(&ops::conv3d_grouped_single_plane(&input, &k, (1, 1, 1))?))
    }

    /// Fusion weights `B×(C_g/2)×T` of `group` for its shifted and residual
    /// tensors `B×(C_g/2)×T×H×W`.
    pub fn fusion_weights(&self, group: usize, shifted: &Tensor<E>, residual: &Tensor<E>) -> Result<Tensor<E>> {
        let Some(kernels) = &self.fusion_kernels else {
            return Err(GsfError::Usage(
                "fusion weights requested but fusion mode is sum".into(),
            ));
        };
        if shifted.shape() != residual.shape() {
            return dim_err("fusion inputs differ in shape");
        }
        let mut tape = Tape::new();
        let k = tape.constant(kernels[group].clone());
        let ys = tape.constant(shifted.clone());
        let r = tape.constant(residual.clone());
        let w = fusion_weight_map(&mut tape, k, ys, r)?;
        let s = tape.shape(w).to_vec();
        tape.value(w).reshape(&s[..3])
    }
}

/// Sigmoid of a 3×3 convolution over the pooled `[shifted; residual]`
/// stack, shaped `B×(C_g/2)×T×1×1` for broadcasting.
fn fusion_weight_map<E: Element>(tape: &mut Tape<E>, kernel: Var, shifted: Var, residual: Var) -> Result<Var> {
    let s = tape.shape(shifted).to_vec();
    let (b, ch, t) = (s[0], s[1], s[2]);
    let py = tape.avg_pool_spatial(shifted)?;
    let pr = tape.avg_pool_spatial(residual)?;
    let py = tape.reshape(py, &[b, 1, ch, t])?;
    let pr = tape.reshape(pr, &[b, 1, ch, t])?;
    let stacked = tape.concat_axis(&[py, pr], 1)?;
    let logits = tape.conv2d(stacked, kernel, 1, 1)?;
    let w = tape.sigmoid(logits)?;
    tape.reshape(w, &[b, ch, t, 1, 1])
}

impl<E: Element> Parameterized<E> for GsfModule<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        if let Some(n) = &self.norm {
            n.visit_params(&join(prefix, "norm"), f);
        }
        if let Some([a, b]) = &self.gate_kernels {
            f(join(prefix, "gate1"), a);
            f(join(prefix, "gate2"), b);
        }
        if let Some([a, b]) = &self.fusion_kernels {
            f(join(prefix, "fuse1"), a);
            f(join(prefix, "fuse2"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        if let Some(n) = &mut self.norm {
            n.visit_params_mut(&join(prefix, "norm"), f);
        }
        if let Some([a, b]) = &mut self.gate_kernels {
            f(join(prefix, "gate1"), a);
            f(join(prefix, "gate2"), b);
        }
        if let Some([a, b]) = &mut self.fusion_kernels {
            f(join(prefix, "fuse1"), a);
            f(join(prefix, "fuse2"), b);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        if let Some(n) = &self.norm {
            n.visit_buffers(&join(prefix, "norm"), f);
        }
    }

    fn visit_norms_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNorm<E>)) {
        if let Some(n) = &mut self.norm {
            f(&join(prefix, "norm"), n);
        }
    }
}

/// Learnable kernel scalars of a GSF with the given modes, normalization
/// excluded: `27·C_g` for a learned gate plus `36` for learned fusion.
pub fn param_count(cg: usize, gate: GateMode, fusion: FusionMode) -> usize {
    let gate_params = if gate == GateMode::Learned { 27 * cg } else { 0 };
    let fusion_params = if fusion == FusionMode::Learned { 36 } else { 0 };
    gate_params + fusion_params
}

pub fn shift_fw<E: Element>(y: &Tensor<E>) -> Result<Tensor<E>> {
    ops::shift_time(y, ShiftDirection::Forward)
}

pub fn shift_bw<E: Element>(y: &Tensor<E>) -> Result<Tensor<E>> {
    ops::shift_time(y, ShiftDirection::Backward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        Tensor::randn(shape, 1.0, &mut seeded(seed))
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("+1".parse::<GateMode>().unwrap(), GateMode::Positive);
        assert_eq!("-1".parse::<GateMode>().unwrap(), GateMode::Negative);
        assert_eq!("0".parse::<GateMode>().unwrap(), GateMode::Zero);
        assert!("2".parse::<GateMode>().is_err());
        assert_eq!("sum".parse::<FusionMode>().unwrap(), FusionMode::Sum);
    }

    #[test]
    fn processed_channels_round_down_to_even() {
        assert_eq!(processed_channels(64, 0.25), 16);
        assert_eq!(processed_channels(10, 0.25), 2);
        assert_eq!(processed_channels(7, 1.0), 6);
        assert_eq!(processed_channels(24, 0.125), 2);
        assert!(GsfConfig::new(3).with_fraction(0.25).validate().is_err());
    }

    #[test]
    fn param_formula_examples() {
        assert_eq!(param_count(64, GateMode::Learned, FusionMode::Learned), 1764);
        assert_eq!(param_count(2, GateMode::Learned, FusionMode::Learned), 90);
        assert_eq!(param_count(64, GateMode::Learned, FusionMode::Sum), 27 * 64);
        assert_eq!(param_count(64, GateMode::Positive, FusionMode::Sum), 0);
    }

    #[test]
    fn module_counts_match_formula() {
        for (gate, fusion) in [
            (GateMode::Learned, FusionMode::Learned),
            (GateMode::Learned, FusionMode::Sum),
            (GateMode::Zero, FusionMode::Learned),
            (GateMode::Positive, FusionMode::Sum),
        ] {
            let cfg = GsfConfig::new(32).with_fraction(0.5).with_modes(gate, fusion);
            let m = GsfModule::<f32>::new(cfg).unwrap();
            assert_eq!(m.kernel_param_count(), param_count(16, gate, fusion));
            let norm = m.norm_param_count();
            assert_eq!(m.param_count(), m.kernel_param_count() + norm);
        }
    }

    #[test]
    fn gate_zero_sum_is_identity() {
        let cfg = GsfConfig::new(6).with_modes(GateMode::Zero, FusionMode::Sum);
        let m = GsfModule::<f32>::new(cfg).unwrap();
        let x = rand_input(&[2, 6, 4, 3, 3], 1);
        assert_eq!(m.apply(&x).unwrap(), x);
    }

    #[test]
    fn zero_init_learned_gate_with_sum_is_identity() {
        let cfg = GsfConfig::new(8).with_modes(GateMode::Learned, FusionMode::Sum);
        let m = GsfModule::<f32>::new(cfg).unwrap();
        let x = rand_input(&[1, 8, 3, 4, 4], 2);
        assert_eq!(m.apply(&x).unwrap(), x);
    }

    #[test]
    fn passthrough_channels_are_untouched() {
        let cfg = GsfConfig::new(16).with_fraction(0.25);
        let m = GsfModule::<f32>::random(cfg, 0.3, &mut seeded(3)).unwrap();
        let x = rand_input(&[2, 16, 4, 3, 3], 4);
        let y = m.apply(&x).unwrap();
        let tail_x = ops::slice_axis(&x, 1, 4, 12).unwrap();
        let tail_y = ops::slice_axis(&y, 1, 4, 12).unwrap();
        assert_eq!(tail_x, tail_y);
    }

    #[test]
    fn channel_mismatch_and_empty_time_are_errors() {
        let m = GsfModule::<f32>::new(GsfConfig::new(4)).unwrap();
        let bad_c = Tensor::zeros(&[1, 6, 2, 2, 2]);
        assert!(matches!(m.apply(&bad_c), Err(GsfError::Config(_))));
        let no_t = Tensor::zeros(&[1, 4, 0, 2, 2]);
        assert!(matches!(m.apply(&no_t), Err(GsfError::Dimension(_))));
    }

    #[test]
    fn zero_gate_kernels_give_zero_gates() {
        let m = GsfModule::<f32>::new(GsfConfig::new(4)).unwrap();
        let g = m.gate_maps(&rand_input(&[1, 4, 3, 4, 4], 5)).unwrap();
        assert_eq!(g.shape(), &[1, 2, 3, 4, 4]);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_maps_need_learned_gate() {
        let cfg = GsfConfig::new(4).with_modes(GateMode::Positive, FusionMode::Sum);
        let m = GsfModule::<f32>::new(cfg).unwrap();
        assert!(matches!(
            m.gate_maps(&Tensor::zeros(&[1, 4, 1, 1, 1])),
            Err(GsfError::Usage(_))
        ));
        assert!(matches!(
            m.fusion_weights(0, &Tensor::zeros(&[1, 2, 1, 1, 1]), &Tensor::zeros(&[1, 2, 1, 1, 1])),
            Err(GsfError::Usage(_))
        ));
    }

    #[test]
    fn zero_fusion_kernel_gives_half() {
        let m = GsfModule::<f32>::new(GsfConfig::new(4)).unwrap();
        let a = rand_input(&[2, 2, 3, 2, 2], 6);
        let b = rand_input(&[2, 2, 3, 2, 2], 7);
        let w = m.fusion_weights(1, &a, &b).unwrap();
        assert_eq!(w.shape(), &[2, 2, 3]);
        assert!(w.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_position_fusion_reduces_to_center_taps() {
        let mut m = GsfModule::<f64>::new(GsfConfig::new(2)).unwrap();
        let mut k = Tensor::<f64>::randn(&[1, 2, 3, 3], 1.0, &mut seeded(8));
        k.set(&[0, 0, 1, 1], 0.7);
        k.set(&[0, 1, 1, 1], -1.3);
        m.set_fusion_kernel(0, k).unwrap();
        let y = Tensor::<f64>::from_vec(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = Tensor::<f64>::from_vec(&[1, 1, 1, 2, 2], vec![0.5, 0.5, -0.5, 0.25]).unwrap();
        let w = m.fusion_weights(0, &y, &r).unwrap();
        let expect = 1.0 / (1.0 + (-(0.7 * 2.5 - 1.3 * 0.1875f64)).exp());
        assert!((w.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn shift_helpers() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(shift_fw(&x).unwrap().data(), &[2.0, 3.0, 0.0]);
        assert_eq!(shift_bw(&x).unwrap().data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn staged_forward_matches_plain_forward() {
        let cfg = GsfConfig::new(8);
        let m = GsfModule::<f32>::random(cfg, 0.2, &mut seeded(9)).unwrap();
        let x = rand_input(&[1, 8, 4, 5, 5], 10);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut clock = StageClock::new();
        let y = m.forward_staged(&mut tape, xv, "g", Some(&mut clock)).unwrap();
        assert_eq!(tape.value(y), &m.apply(&x).unwrap());
    }
}
