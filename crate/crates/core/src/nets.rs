//! Toy frame-wise backbones, GSF insertion, and the clip classifier that
//! averages per-frame logits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{config_err, dim_err, GsfError, Result};
use crate::gsf::{FusionMode, GateMode, GsfConfig, GsfModule};
use crate::layers::{join, BatchNorm, Conv, Dense, Parameterized};
use crate::rng::seeded;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Conv, per-channel affine, rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainBlock<E: Element = f32> {
    pub conv: Conv<E>,
    pub norm: BatchNorm<E>,
}

/// Two branches concatenated along channels. Branch A is a single 1×1
/// conv and is where a GSF goes; branch B is a 1×1 reduction then a 3×3.
#[derive(Clone, Debug, PartialEq)]
pub struct InceptionBlock<E: Element = f32> {
    pub a: Conv<E>,
    pub a_norm: BatchNorm<E>,
    pub gsf: Option<GsfModule<E>>,
    pub b_reduce: Conv<E>,
    pub b_reduce_norm: BatchNorm<E>,
    pub b_conv: Conv<E>,
    pub b_conv_norm: BatchNorm<E>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BottleneckSlot {
    /// After the 3×3 conv, on the reduced width.
    AfterConv2,
    /// After the 1×1 expansion conv, before the residual add.
    AfterConv3,
}

impl fmt::Display for BottleneckSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BottleneckSlot::AfterConv2 => "after_conv2",
            BottleneckSlot::AfterConv3 => "after_conv3",
        })
    }
}

impl FromStr for BottleneckSlot {
    type Err = GsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "after_conv2" => Ok(BottleneckSlot::AfterConv2),
            "after_conv3" => Ok(BottleneckSlot::AfterConv3),
            other => config_err(format!("unknown bottleneck slot `{other}`")),
        }
    }
}

/// 1×1 reduce, 3×3, 1×1 expand, identity shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckBlock<E: Element = f32> {
    pub reduce: Conv<E>,
    pub reduce_norm: BatchNorm<E>,
    pub conv: Conv<E>,
    pub conv_norm: BatchNorm<E>,
    pub expand: Conv<E>,
    pub expand_norm: BatchNorm<E>,
    pub gsf: Option<(BottleneckSlot, GsfModule<E>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block<E: Element = f32> {
    Plain(PlainBlock<E>),
    Inception(InceptionBlock<E>),
    Bottleneck(BottleneckBlock<E>),
}

impl<E: Element> Block<E> {
    pub fn out_channels(&self) -> usize {
        match self {
            Block::Plain(b) => b.conv.c_out(),
            Block::Inception(b) => b.a.c_out() + b.b_conv.c_out(),
            Block::Bottleneck(b) => b.expand.c_out(),
        }
    }

    pub fn gsf(&self) -> Option<&GsfModule<E>> {
        match self {
            Block::Plain(_) => None,
            Block::Inception(b) => b.gsf.as_ref(),
            Block::Bottleneck(b) => b.gsf.as_ref().map(|(_, m)| m),
        }
    }

    fn cast<F: Element>(&self) -> Block<F> {
        fn conv<E: Element, F: Element>(c: &Conv<E>) -> Conv<F> {
            Conv {
                kernel: c.kernel.cast(),
                stride: c.stride,
                pad: c.pad,
            }
        }
        match self {
            Block::Plain(b) => Block::Plain(PlainBlock {
                conv: conv(&b.conv),
                norm: b.norm.cast(),
            }),
            Block::Inception(b) => Block::Inception(InceptionBlock {
                a: conv(&b.a),
                a_norm: b.a_norm.cast(),
                gsf: b.gsf.as_ref().map(GsfModule::cast),
                b_reduce: conv(&b.b_reduce),
                b_reduce_norm: b.b_reduce_norm.cast(),
                b_conv: conv(&b.b_conv),
                b_conv_norm: b.b_conv_norm.cast(),
            }),
            Block::Bottleneck(b) => Block::Bottleneck(BottleneckBlock {
                reduce: conv(&b.reduce),
                reduce_norm: b.reduce_norm.cast(),
                conv: conv(&b.conv),
                conv_norm: b.conv_norm.cast(),
                expand: conv(&b.expand),
                expand_norm: b.expand_norm.cast(),
                gsf: b.gsf.as_ref().map(|(s, m)| (*s, m.cast())),
            }),
        }
    }
}

fn conv_norm_relu<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    conv: &Conv<E>,
    norm: &BatchNorm<E>,
    prefix: &str,
    name: &str,
) -> Result<Var> {
    let y = conv.forward(tape, x, &join(prefix, name))?;
    let y = norm.forward(tape, y, &join(prefix, &format!("{name}_norm")))?;
    tape.relu(y)
}

/// Applies a GSF to `(B·T)×C×H×W` frame features.
fn gsf_on_frames<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    frames: usize,
    gsf: &GsfModule<E>,
    prefix: &str,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if frames == 0 || n % frames != 0 {
        return dim_err(format!("{n} frames do not split into clips of {frames}"));
    }
    let v = tape.reshape(x, &[n / frames, frames, c, h, w])?;
    let v = tape.permute(v, &[0, 2, 1, 3, 4])?;
    let v = gsf.forward(tape, v, prefix)?;
    let v = tape.permute(v, &[0, 2, 1, 3, 4])?;
    tape.reshape(v, &[n, c, h, w])
}

impl<E: Element> Block<E> {
    fn forward(&self, tape: &mut Tape<E>, x: Var, frames: usize, prefix: &str) -> Result<Var> {
        match self {
            Block::Plain(b) => conv_norm_relu(tape, x, &b.conv, &b.norm, prefix, "conv"),
            Block::Inception(b) => {
                let mut a = b.a.forward(tape, x, &join(prefix, "a"))?;
                if let Some(g) = &b.gsf {
                    a = gsf_on_frames(tape, a, frames, g, &join(prefix, "gsf"))?;
                }
                let a = b.a_norm.forward(tape, a, &join(prefix, "a_norm"))?;
                let a = tape.relu(a)?;
                let r = conv_norm_relu(tape, x, &b.b_reduce, &b.b_reduce_norm, prefix, "b_reduce")?;
                let r = conv_norm_relu(tape, r, &b.b_conv, &b.b_conv_norm, prefix, "b_conv")?;
                tape.concat_axis(&[a, r], 1)
            }
            Block::Bottleneck(b) => {
                let gsf_at = |slot| b.gsf.as_ref().filter(|(s, _)| *s == slot).map(|(_, m)| m);
                let y = conv_norm_relu(tape, x, &b.reduce, &b.reduce_norm, prefix, "reduce")?;
                let mut y = b.conv.forward(tape, y, &join(prefix, "conv"))?;
                if let Some(g) = gsf_at(BottleneckSlot::AfterConv2) {
                    y = gsf_on_frames(tape, y, frames, g, &join(prefix, "gsf"))?;
                }
                let y = b.conv_norm.forward(tape, y, &join(prefix, "conv_norm"))?;
                let y = tape.relu(y)?;
                let mut y = b.expand.forward(tape, y, &join(prefix, "expand"))?;
                if let Some(g) = gsf_at(BottleneckSlot::AfterConv3) {
                    y = gsf_on_frames(tape, y, frames, g, &join(prefix, "gsf"))?;
                }
                let y = b.expand_norm.forward(tape, y, &join(prefix, "expand_norm"))?;
                let y = tape.add(y, x)?;
                tape.relu(y)
            }
        }
    }
}

impl<E: Element> Parameterized<E> for Block<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        let p = |n: &str| join(prefix, n);
        match self {
            Block::Plain(b) => {
                b.conv.visit_params(&p("conv"), f);
                b.norm.visit_params(&p("conv_norm"), f);
            }
            Block::Inception(b) => {
                b.a.visit_params(&p("a"), f);
                if let Some(g) = &b.gsf {
                    g.visit_params(&p("gsf"), f);
                }
                b.a_norm.visit_params(&p("a_norm"), f);
                b.b_reduce.visit_params(&p("b_reduce"), f);
                b.b_reduce_norm.visit_params(&p("b_reduce_norm"), f);
                b.b_conv.visit_params(&p("b_conv"), f);
                b.b_conv_norm.visit_params(&p("b_conv_norm"), f);
            }
            Block::Bottleneck(b) => {
                b.reduce.visit_params(&p("reduce"), f);
                b.reduce_norm.visit_params(&p("reduce_norm"), f);
                b.conv.visit_params(&p("conv"), f);
                b.conv_norm.visit_params(&p("conv_norm"), f);
                b.expand.visit_params(&p("expand"), f);
                b.expand_norm.visit_params(&p("expand_norm"), f);
                if let Some((_, g)) = &b.gsf {
                    g.visit_params(&p("gsf"), f);
                }
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        let p = |n: &str| join(prefix, n);
        match self {
            Block::Plain(b) => {
                b.conv.visit_params_mut(&p("conv"), f);
                b.norm.visit_params_mut(&p("conv_norm"), f);
            }
            Block::Inception(b) => {
                b.a.visit_params_mut(&p("a"), f);
                if let Some(g) = &mut b.gsf {
                    g.visit_params_mut(&p("gsf"), f);
                }
                b.a_norm.visit_params_mut(&p("a_norm"), f);
                b.b_reduce.visit_params_mut(&p("b_reduce"), f);
                b.b_reduce_norm.visit_params_mut(&p("b_reduce_norm"), f);
                b.b_conv.visit_params_mut(&p("b_conv"), f);
                b.b_conv_norm.visit_params_mut(&p("b_conv_norm"), f);
            }
            Block::Bottleneck(b) => {
                b.reduce.visit_params_mut(&p("reduce"), f);
                b.reduce_norm.visit_params_mut(&p("reduce_norm"), f);
                b.conv.visit_params_mut(&p("conv"), f);
                b.conv_norm.visit_params_mut(&p("conv_norm"), f);
                b.expand.visit_params_mut(&p("expand"), f);
                b.expand_norm.visit_params_mut(&p("expand_norm"), f);
                if let Some((_, g)) = &mut b.gsf {
                    g.visit_params_mut(&p("gsf"), f);
                }
            }
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        for (name, n) in self.norms(prefix) {
            n.visit_buffers(&name, f);
        }
    }

    fn visit_norms_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNorm<E>)) {
        for (name, n) in self.norms_mut(prefix) {
            f(&name, n);
        }
    }
}

impl<E: Element> Block<E> {
    /// Normalization layers with their names, GSF ones included.
    fn norms_mut(&mut self, prefix: &str) -> Vec<(String, &mut BatchNorm<E>)> {
        let p = |n: &str| join(prefix, n);
        let mut out = Vec::new();
        let gsf = match self {
            Block::Plain(b) => {
                out.push((p("conv_norm"), &mut b.norm));
                None
            }
            Block::Inception(b) => {
                out.push((p("a_norm"), &mut b.a_norm));
                out.push((p("b_reduce_norm"), &mut b.b_reduce_norm));
                out.push((p("b_conv_norm"), &mut b.b_conv_norm));
                b.gsf.as_mut()
            }
            Block::Bottleneck(b) => {
                out.push((p("reduce_norm"), &mut b.reduce_norm));
                out.push((p("conv_norm"), &mut b.conv_norm));
                out.push((p("expand_norm"), &mut b.expand_norm));
                b.gsf.as_mut().map(|(_, g)| g)
            }
        };
        if let Some(n) = gsf.and_then(GsfModule::norm_mut) {
            out.push((p("gsf.norm"), n));
        }
        out
    }

    fn norms(&self, prefix: &str) -> Vec<(String, &BatchNorm<E>)> {
        let p = |n: &str| join(prefix, n);
        let mut out = Vec::new();
        let gsf = match self {
            Block::Plain(b) => {
                out.push((p("conv_norm"), &b.norm));
                None
            }
            Block::Inception(b) => {
                out.push((p("a_norm"), &b.a_norm));
                out.push((p("b_reduce_norm"), &b.b_reduce_norm));
                out.push((p("b_conv_norm"), &b.b_conv_norm));
                b.gsf.as_ref()
            }
            Block::Bottleneck(b) => {
                out.push((p("reduce_norm"), &b.reduce_norm));
                out.push((p("conv_norm"), &b.conv_norm));
                out.push((p("expand_norm"), &b.expand_norm));
                b.gsf.as_ref().map(|(_, g)| g)
            }
        };
        if let Some(n) = gsf.and_then(GsfModule::norm) {
            out.push((p("gsf.norm"), n));
        }
        out
    }
}

/// Insertion policy for GSF modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InsertPolicy {
    /// Into the branch with the fewest convolutions of each Inception block.
    InceptionLeastBranch,
    /// Into the residual branch of each bottleneck block.
    BottleneckAfterExpand,
}

/// Ordered list of frame-wise blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone<E: Element = f32> {
    pub in_channels: usize,
    pub blocks: Vec<Block<E>>,
}

impl<E: Element> ToyBackbone<E> {
    /// A strided stem followed by two Inception blocks.
    pub fn inception_toy<R: Rng + ?Sized>(in_channels: usize, width: usize, rng: &mut R) -> Result<Self> {
        check_width(width)?;
        let half = (width / 2).max(1);
        let plain = |cin, cout, k, stride, rng: &mut R| {
            Block::Plain(PlainBlock {
                conv: Conv::new(cin, cout, k, stride, rng),
                norm: BatchNorm::new(cout),
            })
        };
        let inception = |cin: usize, a: usize, reduce: usize, b: usize, rng: &mut R| {
            Block::Inception(InceptionBlock {
                a: Conv::new(cin, a, 1, 1, rng),
                a_norm: BatchNorm::new(a),
                gsf: None,
                b_reduce: Conv::new(cin, reduce, 1, 1, rng),
                b_reduce_norm: BatchNorm::new(reduce),
                b_conv: Conv::new(reduce, b, 3, 1, rng),
                b_conv_norm: BatchNorm::new(b),
            })
        };
        let blocks = vec![
            plain(in_channels, width, 3, 2, rng),
            inception(width, half, half, half, rng),
            inception(2 * half, width, half, width, rng),
        ];
        Ok(ToyBackbone { in_channels, blocks })
    }

    /// A strided stem followed by two bottleneck blocks at `width` channels.
    pub fn bottleneck_toy<R: Rng + ?Sized>(in_channels: usize, width: usize, rng: &mut R) -> Result<Self> {
        check_width(width)?;
        let mid = (width / 4).max(1);
        let bottleneck = |rng: &mut R| {
            Block::Bottleneck(BottleneckBlock {
                reduce: Conv::new(width, mid, 1, 1, rng),
                reduce_norm: BatchNorm::new(mid),
                conv: Conv::new(mid, mid, 3, 1, rng),
                conv_norm: BatchNorm::new(mid),
                expand: Conv::new(mid, width, 1, 1, rng),
                expand_norm: BatchNorm::new(width),
                gsf: None,
            })
        };
        let blocks = vec![
            Block::Plain(PlainBlock {
                conv: Conv::new(in_channels, width, 3, 2, rng),
                norm: BatchNorm::new(width),
            }),
            bottleneck(rng),
            bottleneck(rng),
        ];
        Ok(ToyBackbone { in_channels, blocks })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, Block::out_channels)
    }

    /// Inserts a zero-initialized GSF into every compatible block.
    ///
    /// `template.channels_in` is ignored; each module is sized to its site.
    /// For the bottleneck policy the slot is [`BottleneckSlot::AfterConv3`]
    /// unless `slot` says otherwise.
    pub fn insert_gsf(&self, policy: InsertPolicy, template: &GsfConfig, slot: Option<BottleneckSlot>) -> Result<Self> {
        let mut out = self.clone();
        let mut inserted = 0;
        for block in &mut out.blocks {
            match (policy, block) {
                (InsertPolicy::InceptionLeastBranch, Block::Inception(b)) => {
                    let cfg = GsfConfig {
                        channels_in: b.a.c_out(),
                        ..*template
                    };
                    b.gsf = Some(GsfModule::new(cfg)?);
                    inserted += 1;
                }
                (InsertPolicy::BottleneckAfterExpand, Block::Bottleneck(b)) => {
                    let slot = slot.unwrap_or(BottleneckSlot::AfterConv3);
                    let channels = match slot {
                        BottleneckSlot::AfterConv2 => b.conv.c_out(),
                        BottleneckSlot::AfterConv3 => b.expand.c_out(),
                    };
                    let cfg = GsfConfig {
                        channels_in: channels,
                        ..*template
                    };
                    b.gsf = Some((slot, GsfModule::new(cfg)?));
                    inserted += 1;
                }
                (_, Block::Plain(_)) => {}
                (policy, _) => {
                    return config_err(format!("policy {policy:?} does not apply to this block kind"));
                }
            }
        }
        if inserted == 0 {
            return config_err(format!("policy {policy:?} found no compatible block"));
        }
        Ok(out)
    }

    pub fn gsf_modules(&self) -> impl Iterator<Item = &GsfModule<E>> {
        self.blocks.iter().filter_map(Block::gsf)
    }

    /// Runs all blocks on `(B·T)×C×H×W` frames.
    pub fn forward(&self, tape: &mut Tape<E>, x: Var, frames: usize, prefix: &str) -> Result<Var> {
        let mut y = x;
        for (i, block) in self.blocks.iter().enumerate() {
            y = block.forward(tape, y, frames, &join(prefix, &format!("b{i}")))?;
        }
        Ok(y)
    }

    pub fn cast<F: Element>(&self) -> ToyBackbone<F> {
        ToyBackbone {
            in_channels: self.in_channels,
            blocks: self.blocks.iter().map(Block::cast).collect(),
        }
    }
}

fn check_width(width: usize) -> Result<()> {
    if !(4..=64).contains(&width) {
        return config_err(format!("toy width {width} outside 4..=64"));
    }
    Ok(())
}

impl<E: Element> Parameterized<E> for ToyBackbone<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("b{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("b{i}")), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_buffers(&join(prefix, &format!("b{i}")), f);
        }
    }

    fn visit_norms_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNorm<E>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_norms_mut(&join(prefix, &format!("b{i}")), f);
        }
    }
}

/// Frame-wise backbone plus linear head; clip logits are the mean of
/// per-frame logits.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClassifier<E: Element = f32> {
    pub backbone: ToyBackbone<E>,
    pub head: Dense<E>,
    pub num_classes: usize,
    pub frames: usize,
    pub dropout: f64,
}

impl<E: Element> VideoClassifier<E> {
    pub fn new<R: Rng + ?Sized>(
        backbone: ToyBackbone<E>,
        num_classes: usize,
        frames: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 {
            return config_err("need at least two classes");
        }
        if frames == 0 {
            return config_err("need at least one frame per clip");
        }
        let head = Dense::new(backbone.out_channels(), num_classes, rng);
        Ok(VideoClassifier {
            backbone,
            head,
            num_classes,
            frames,
            dropout: 0.5,
        })
    }

    /// Replaces the backbone, keeping the head.
    pub fn with_backbone(&self, backbone: ToyBackbone<E>) -> Self {
        VideoClassifier {
            backbone,
            ..self.clone()
        }
    }

    /// Clip logits `B×K` for a `B×T×C×H×W` clip.
    ///
    /// With `dropout_rng` set, features entering the classifier are dropped
    /// with probability [`dropout`](Self::dropout) and rescaled.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<E>, clip: Var, dropout_rng: Option<&mut R>) -> Result<Var> {
        let s = tape.shape(clip).to_vec();
        if s.len() != 5 {
            return dim_err(format!("clip must be B×T×C×H×W, got {s:?}"));
        }
        let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        if t != self.frames {
            return dim_err(format!("model expects {} frames, clip has {t}", self.frames));
        }
        if c != self.backbone.in_channels {
            return dim_err(format!(
                "model expects {} image channels, clip has {c}",
                self.backbone.in_channels
            ));
        }
        let x = tape.reshape(clip, &[b * t, c, h, w])?;
        let feats = self.backbone.forward(tape, x, t, "backbone")?;
        let mut pooled = tape.avg_pool_spatial(feats)?;
        if let Some(rng) = dropout_rng {
            if self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let shape = tape.shape(pooled).to_vec();
                let n: usize = shape.iter().product();
                let mask: Vec<E> = (0..n)
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            E::from_f64(1.0 / keep)
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                let m = tape.constant(Tensor::from_vec(&shape, mask)?);
                pooled = tape.hadamard(pooled, m)?;
            }
        }
        let frame_logits = self.head.forward(tape, pooled, "head")?;
        let per_clip = tape.reshape(frame_logits, &[b, t, self.num_classes])?;
        tape.mean_axis(per_clip, 1)
    }

    /// Inference logits for a plain clip tensor.
    pub fn logits(&self, clip: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let x = tape.constant(clip.clone());
        let y = self.forward::<rand_chacha::ChaCha8Rng>(&mut tape, x, None)?;
        Ok(tape.value(y).clone())
    }

    /// Multiply-accumulates recorded for one inference pass on `clip_shape`.
    pub fn measured_macs(&self, clip_shape: &[usize]) -> Result<u64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(clip_shape));
        self.forward::<rand_chacha::ChaCha8Rng>(&mut tape, x, None)?;
        Ok(tape.macs())
    }

    pub fn cast<F: Element>(&self) -> VideoClassifier<F> {
        VideoClassifier {
            backbone: self.backbone.cast(),
            head: Dense {
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
            num_classes: self.num_classes,
            frames: self.frames,
            dropout: self.dropout,
        }
    }
}

impl<E: Element> Parameterized<E> for VideoClassifier<E> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.backbone.visit_params_mut(&join(prefix, "backbone"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.backbone.visit_buffers(&join(prefix, "backbone"), f);
    }

    fn visit_norms_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNorm<E>)) {
        self.backbone.visit_norms_mut(&join(prefix, "backbone"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchKind {
    InceptionToy,
    BottleneckToy,
}

impl ArchKind {
    pub fn default_width(self) -> usize {
        match self {
            ArchKind::InceptionToy => 16,
            ArchKind::BottleneckToy => 32,
        }
    }

    pub fn default_fraction(self) -> f64 {
        match self {
            ArchKind::InceptionToy => 1.0,
            ArchKind::BottleneckToy => 0.25,
        }
    }

    pub fn policy(self) -> InsertPolicy {
        match self {
            ArchKind::InceptionToy => InsertPolicy::InceptionLeastBranch,
            ArchKind::BottleneckToy => InsertPolicy::BottleneckAfterExpand,
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::InceptionToy => "inception_toy",
            ArchKind::BottleneckToy => "bottleneck_toy",
        })
    }
}

impl FromStr for ArchKind {
    type Err = GsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inception_toy" => Ok(ArchKind::InceptionToy),
            "bottleneck_toy" => Ok(ArchKind::BottleneckToy),
            other => config_err(format!("unknown arch `{other}` (inception_toy, bottleneck_toy)")),
        }
    }
}

/// Everything needed to rebuild a [`VideoClassifier`]; stored as
/// `key=value` lines next to weight files.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub arch: ArchKind,
    pub in_channels: usize,
    pub width: usize,
    pub classes: usize,
    pub frames: usize,
    pub gsf: bool,
    pub gate: GateMode,
    pub fusion: FusionMode,
    pub fraction: f64,
    pub pre_gate_norm: bool,
    pub slot: BottleneckSlot,
    pub seed: u64,
}

impl ArchConfig {
    pub fn new(arch: ArchKind, classes: usize, frames: usize) -> Self {
        ArchConfig {
            arch,
            in_channels: 1,
            width: arch.default_width(),
            classes,
            frames,
            gsf: true,
            gate: GateMode::Learned,
            fusion: FusionMode::Learned,
            fraction: arch.default_fraction(),
            pre_gate_norm: true,
            slot: BottleneckSlot::AfterConv3,
            seed: 0,
        }
    }

    pub fn gsf_template(&self) -> GsfConfig {
        GsfConfig {
            channels_in: 0,
            fraction: self.fraction,
            gate_mode: self.gate,
            fusion_mode: self.fusion,
            pre_gate_norm: self.pre_gate_norm,
        }
    }

    /// Builds the backbone without GSF, then inserts modules if enabled.
    /// Backbone and head weights depend only on `seed`, so models that
    /// differ only in GSF settings share all other initial weights.
    pub fn build<E: Element>(&self) -> Result<VideoClassifier<E>> {
        let mut rng = seeded(self.seed);
        let backbone = match self.arch {
            ArchKind::InceptionToy => ToyBackbone::inception_toy(self.in_channels, self.width, &mut rng)?,
            ArchKind::BottleneckToy => ToyBackbone::bottleneck_toy(self.in_channels, self.width, &mut rng)?,
        };
        let model = VideoClassifier::new(backbone, self.classes, self.frames, &mut rng)?;
        if !self.gsf {
            return Ok(model);
        }
        let with = model
            .backbone
            .insert_gsf(self.arch.policy(), &self.gsf_template(), Some(self.slot))?;
        Ok(model.with_backbone(with))
    }

    pub fn to_text(&self) -> String {
        format!(
            "arch={}\nin_channels={}\nwidth={}\nclasses={}\nframes={}\ngsf={}\ngate={}\nfusion={}\nfraction={}\npre_gate_norm={}\nslot={}\nseed={}\n",
            self.arch,
            self.in_channels,
            self.width,
            self.classes,
            self.frames,
            if self.gsf { "on" } else { "off" },
            self.gate,
            self.fusion,
            self.fraction,
            self.pre_gate_norm,
            self.slot,
            self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(GsfError::Data(format!("arch line {}: expected key=value", n + 1)));
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| GsfError::Data(format!("arch config missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| GsfError::Data(format!("arch config `{k}` is not a count")))
        };
        let arch: ArchKind = get("arch")?.parse()?;
        let mut cfg = ArchConfig::new(arch, num("classes")?, num("frames")?);
        cfg.in_channels = num("in_channels")?;
        cfg.width = num("width")?;
        cfg.gsf = match get("gsf")? {
            "on" => true,
            "off" => false,
            other => return Err(GsfError::Data(format!("arch config gsf=`{other}`"))),
        };
        cfg.gate = get("gate")?.parse()?;
        cfg.fusion = get("fusion")?.parse()?;
        cfg.fraction = get("fraction")?
            .parse()
            .map_err(|_| GsfError::Data("arch config `fraction` is not a number".into()))?;
        cfg.pre_gate_norm = get("pre_gate_norm")?
            .parse()
            .map_err(|_| GsfError::Data("arch config `pre_gate_norm` is not a bool".into()))?;
        cfg.slot = get("slot")?.parse()?;
        cfg.seed = get("seed")?
            .parse()
            .map_err(|_| GsfError::Data("arch config `seed` is not an integer".into()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsf;
    use crate::tape::Gradients;

    fn clip(shape: &[usize], seed: u64) -> Tensor<f32> {
        Tensor::randn(shape, 1.0, &mut seeded(seed))
    }

    #[test]
    fn inception_insert_adds_formula_params() {
        let cfg = ArchConfig {
            gsf: false,
            ..ArchConfig::new(ArchKind::InceptionToy, 3, 4)
        };
        let base = cfg.build::<f32>().unwrap();
        let with = base
            .backbone
            .insert_gsf(
                InsertPolicy::InceptionLeastBranch,
                &GsfConfig::new(0).with_pre_gate_norm(false),
                None,
            )
            .unwrap();
        let expect: usize = with
            .gsf_modules()
            .map(|m| gsf::param_count(m.config().processed_channels(), GateMode::Learned, FusionMode::Learned))
            .sum();
        assert_eq!(with.gsf_modules().count(), 2);
        assert_eq!(with.param_count() - base.backbone.param_count(), expect);
    }

    #[test]
    fn bottleneck_width_32_quarter_fraction() {
        let mut rng = seeded(1);
        let b = ToyBackbone::<f32>::bottleneck_toy(1, 32, &mut rng).unwrap();
        let tmpl = GsfConfig::new(0).with_fraction(0.25).with_pre_gate_norm(false);
        let with = b.insert_gsf(InsertPolicy::BottleneckAfterExpand, &tmpl, None).unwrap();
        for m in with.gsf_modules() {
            assert_eq!(m.config().processed_channels(), 8);
            assert_eq!(m.kernel_param_count(), 252);
        }
        assert_eq!(with.param_count() - b.param_count(), 2 * 252);
    }

    #[test]
    fn mismatched_policy_is_config_error() {
        let b = ToyBackbone::<f32>::bottleneck_toy(1, 16, &mut seeded(2)).unwrap();
        let r = b.insert_gsf(InsertPolicy::InceptionLeastBranch, &GsfConfig::new(0), None);
        assert!(matches!(r, Err(GsfError::Config(_))));
    }

    #[test]
    fn identity_insert_keeps_logits() {
        for arch in [ArchKind::InceptionToy, ArchKind::BottleneckToy] {
            let mut cfg = ArchConfig::new(arch, 4, 4);
            cfg.gsf = false;
            let base = cfg.build::<f32>().unwrap();
            cfg.gsf = true;
            cfg.fusion = FusionMode::Sum;
            let with = cfg.build::<f32>().unwrap();
            let x = clip(&[2, 4, 1, 8, 8], 3);
            assert_eq!(base.logits(&x).unwrap(), with.logits(&x).unwrap());
        }
    }

    #[test]
    fn frame_mismatch_is_dimension_error() {
        let m = ArchConfig::new(ArchKind::InceptionToy, 2, 4).build::<f32>().unwrap();
        assert!(matches!(
            m.logits(&clip(&[1, 3, 1, 8, 8], 4)),
            Err(GsfError::Dimension(_))
        ));
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        use crate::oracle::grad_check;
        let cases = [ArchKind::InceptionToy, ArchKind::BottleneckToy]
            .into_iter()
            .flat_map(|a| [(a, false), (a, true)]);
        for (arch, training) in cases {
            let mut cfg = ArchConfig::new(arch, 3, 3);
            cfg.width = 8;
            cfg.fraction = 0.5;
            let mut model = cfg.build::<f64>().unwrap();
            let mut rng = seeded(11);
            model.visit_params_mut("", &mut |name, t| {
                if name.ends_with("offset") {
                    *t = Tensor::randn(t.shape(), 0.5, &mut rng);
                } else if name.contains(".gsf.") && !name.ends_with("scale") {
                    *t = Tensor::randn(t.shape(), 0.3, &mut rng);
                }
            });
            let x = Tensor::<f64>::randn(&[2, 3, 1, 6, 6], 1.0, &mut seeded(15));
            let labels = [0usize, 2];
            let loss = |m: &VideoClassifier<f64>| -> Result<(f64, Gradients<f64>)> {
                let mut tape = if training { Tape::training() } else { Tape::new() };
                let xv = tape.constant(x.clone());
                let y = m.forward::<crate::rng::GsfRng>(&mut tape, xv, None)?;
                let l = tape.cross_entropy(y, &labels)?;
                let g = tape.backward(l)?;
                Ok((tape.value(l).data()[0], g))
            };
            let (_, grads) = loss(&model).unwrap();
            let mut theta = Vec::new();
            let mut analytic = Vec::new();
            model.visit_params("", &mut |name, t| {
                theta.extend_from_slice(t.data());
                analytic.extend_from_slice(grads.named(&name).unwrap().data());
            });
            let mut probe = model.clone();
            let r = grad_check(
                |p| {
                    let mut off = 0;
                    probe.visit_params_mut("", &mut |_, t| {
                        let n = t.len();
                        t.data_mut().copy_from_slice(&p[off..off + n]);
                        off += n;
                    });
                    Ok(loss(&probe)?.0)
                },
                &theta,
                &analytic,
                1e-5,
                1e-4,
            )
            .unwrap();
            let mut names = Vec::new();
            model.visit_params("", &mut |name, t| names.extend(std::iter::repeat_n(name, t.len())));
            assert!(
                r.passed(),
                "{arch} training={training}: {r:?} {:?}",
                r.failing_index.map(|i| &names[i])
            );
        }
    }

    #[test]
    fn arch_text_round_trips() {
        let mut cfg = ArchConfig::new(ArchKind::BottleneckToy, 4, 8);
        cfg.gate = GateMode::Negative;
        cfg.fraction = 0.5;
        cfg.slot = BottleneckSlot::AfterConv2;
        cfg.seed = 99;
        assert_eq!(ArchConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(ArchConfig::parse("arch=inception_toy\n").is_err());
    }
}
