//! SGD with momentum on clip-level cross-entropy, warmup plus cosine
//! schedule, and the two inference protocols.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{
    batch_tensor, crops, sample_clips, sample_frames, Clip, ClipDataset, Protocol, Rect, SampleMode, Task,
};
use crate::error::{config_err, GsfError, Result};
use crate::layers::Parameterized;
use crate::nets::VideoClassifier;
use crate::rng::{seeded, GsfRng};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Apply weight decay to GSF gate and fusion kernels too.
    pub decay_gsf: bool,
    /// Square training and evaluation crop; the frame's shorter side if
    /// unset.
    pub crop: Option<usize>,
    /// Random horizontal flips, with labels remapped for this task.
    pub flip: Option<Task>,
}

impl TrainConfig {
    /// Defaults for `epochs` epochs, with the 10-of-60 warmup scaled.
    pub fn new(epochs: usize) -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs,
            warmup_epochs: scaled_warmup(epochs),
            batch_size: 8,
            dropout: 0.5,
            seed: 0,
            decay_gsf: true,
            crop: None,
            flip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return config_err("need at least one epoch");
        }
        if self.warmup_epochs >= self.epochs {
            return config_err(format!(
                "warmup of {} epochs must be shorter than {} epochs",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return config_err("lr0 must be positive");
        }
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return config_err("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `round(10·E/60)`, kept below `E`.
pub fn scaled_warmup(epochs: usize) -> usize {
    ((10 * epochs + 30) / 60).min(epochs.saturating_sub(1))
}

/// Linear ramp `lr0·(e+1)/warmup`, then cosine decay to 0 at `E`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(GsfError::Usage(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    Ok(lr_at_position(epoch as f64, cfg))
}

/// The schedule at a real-valued epoch position; `E` itself gives 0.
pub fn lr_at_position(e: f64, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_epochs as f64;
    if e < w {
        cfg.lr0 * ((e + 1.0) / w)
    } else {
        cfg.lr0 * 0.5 * (1.0 + (PI * (e - w) / (cfg.epochs as f64 - w)).cos())
    }
}

/// `v ← μ·v + g + λ·p; p ← p − lr·v`, in 64-bit arithmetic.
pub fn sgd_update(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let nv = momentum * *v as f64 + g as f64 + weight_decay * *p as f64;
        *v = nv as f32;
        *p = (*p as f64 - lr * nv) as f32;
    }
}

/// Optimizer buffers and position.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub velocity: Vec<Tensor<f32>>,
    pub epoch: usize,
    pub step: usize,
    pub rng: GsfRng,
}

impl TrainState {
    pub fn new(model: &VideoClassifier<f32>, seed: u64) -> Self {
        let mut velocity = Vec::new();
        model.visit_params("", &mut |_, t| velocity.push(Tensor::zeros(t.shape())));
        TrainState {
            velocity,
            epoch: 0,
            step: 0,
            rng: seeded(seed),
        }
    }
}

/// One SGD step on a `B×T×C×H×W` batch; returns the mean loss before the
/// update.
pub fn train_step(
    model: &mut VideoClassifier<f32>,
    state: &mut TrainState,
    batch: &Tensor<f32>,
    labels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::training();
    let x = tape.constant(batch.clone());
    let diagnose = |e: GsfError, model: &VideoClassifier<f32>, state: &TrainState| match e {
        GsfError::Numeric(msg) => GsfError::Numeric(format!(
            "epoch {} step {}: {msg}\n{}",
            state.epoch,
            state.step,
            param_summary(model)
        )),
        other => other,
    };
    let logits = model
        .forward(&mut tape, x, Some(&mut state.rng))
        .map_err(|e| diagnose(e, model, state))?;
    let loss = tape
        .cross_entropy(logits, labels)
        .map_err(|e| diagnose(e, model, state))?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(diagnose(GsfError::Numeric(format!("loss is {value}")), model, state));
    }
    let grads = tape.backward(loss)?;
    let mut gs = Vec::new();
    model.visit_params("", &mut |name, t| {
        gs.push(grads.named(&name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())));
    });
    let mut i = 0;
    let vel = &mut state.velocity;
    model.visit_params_mut("", &mut |name, p| {
        let wd = if !cfg.decay_gsf && name.contains(".gsf.") {
            0.0
        } else {
            cfg.weight_decay
        };
        sgd_update(p.data_mut(), gs[i].data(), vel[i].data_mut(), lr, cfg.momentum, wd);
        i += 1;
    });
    model.absorb_stats("", tape.batch_stats());
    state.step += 1;
    Ok(value)
}

/// Per-parameter norms, one line each.
pub fn param_summary(model: &VideoClassifier<f32>) -> String {
    let mut s = String::new();
    model.visit_params("", &mut |name, t| {
        let _ = writeln!(
            s,
            "  {name}\t{:?}\tnorm={:.6e}\tfinite={}",
            t.shape(),
            t.norm(),
            t.is_finite()
        );
    });
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: f64,
}

impl EpochLog {
    /// `epoch<TAB>lr<TAB>train_loss<TAB>eval_acc`.
    pub fn line(&self) -> String {
        format!(
            "{}\t{:.8}\t{:.6}\t{:.6}",
            self.epoch, self.lr, self.train_loss, self.eval_acc
        )
    }
}

fn crop_size(cfg_crop: Option<usize>, data: &ClipDataset) -> usize {
    let (_, _, h, w) = data.dims();
    cfg_crop.unwrap_or(h.min(w))
}

fn random_rect<R: Rng + ?Sized>(h: usize, w: usize, size: usize, rng: &mut R) -> Rect {
    Rect {
        top: rng.gen_range(0..=h - size),
        left: rng.gen_range(0..=w - size),
        size,
    }
}

/// Trains `model` in place, calling `on_epoch` after every epoch's
/// evaluation. Deterministic in `cfg.seed`.
pub fn fit(
    model: &mut VideoClassifier<f32>,
    train: &ClipDataset,
    eval: &ClipDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(GsfError::Data("training and evaluation sets must be non-empty".into()));
    }
    let (len, _, h, w) = train.dims();
    let size = crop_size(cfg.crop, train);
    if size > h || size > w {
        return config_err(format!("crop {size} does not fit {h}×{w} frames"));
    }
    if let Some(bad) = train
        .clips
        .iter()
        .chain(&eval.clips)
        .find(|c| c.label >= model.num_classes)
    {
        return Err(GsfError::Data(format!(
            "label {} for a {}-class model",
            bad.label, model.num_classes
        )));
    }
    model.dropout = cfg.dropout;
    let mut state = TrainState::new(model, cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut views = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let clip = &train.clips[i];
                let frames = sample_frames(len, model.frames, SampleMode::TrainJitter, &mut state.rng)?;
                let rect = random_rect(h, w, size, &mut state.rng);
                let (flip, label) = match cfg.flip {
                    Some(task) if state.rng.gen::<bool>() => (true, task.flip_label(clip.label)),
                    _ => (false, clip.label),
                };
                views.push((clip, frames, rect, flip));
                labels.push(label);
            }
            let batch = batch_tensor(&views)?;
            loss_sum += train_step(model, &mut state, &batch, &labels, lr, cfg)? * chunk.len() as f64;
            seen += chunk.len();
        }
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            eval_acc: evaluate(model, eval, Protocol::Efficiency, cfg.crop)?,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Clip logits averaged over every view the protocol prescribes.
pub fn predict(
    model: &VideoClassifier<f32>,
    clip: &Clip,
    protocol: Protocol,
    crop: Option<usize>,
) -> Result<Tensor<f32>> {
    Ok(predict_many(model, &[clip], protocol, crop)?.remove(0))
}

fn predict_many(
    model: &VideoClassifier<f32>,
    clips: &[&Clip],
    protocol: Protocol,
    crop: Option<usize>,
) -> Result<Vec<Tensor<f32>>> {
    let Some(first) = clips.first() else {
        return Ok(Vec::new());
    };
    let size = crop.unwrap_or(first.h.min(first.w));
    let rects = crops(protocol, first.h, first.w, size)?;
    let samples = sample_clips(first.t, model.frames, protocol.clips())?;
    let mut views = Vec::with_capacity(clips.len() * rects.len());
    for clip in clips {
        for (k, rect) in &rects {
            views.push((*clip, samples[*k].clone(), *rect, false));
        }
    }
    let logits = model.logits(&batch_tensor(&views)?)?;
    let k = model.num_classes;
    let per = rects.len();
    Ok((0..clips.len())
        .map(|c| {
            let mut acc = vec![0.0f64; k];
            for v in 0..per {
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += logits.data()[(c * per + v) * k + j] as f64;
                }
            }
            let data = acc.iter().map(|a| (a / per as f64) as f32).collect();
            Tensor::from_vec(&[k], data).expect("logit shape")
        })
        .collect())
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy under `protocol`.
pub fn evaluate(
    model: &VideoClassifier<f32>,
    data: &ClipDataset,
    protocol: Protocol,
    crop: Option<usize>,
) -> Result<f64> {
    let refs: Vec<&Clip> = data.clips.iter().collect();
    let mut correct = 0usize;
    for chunk in refs.chunks(16) {
        for (clip, logits) in chunk.iter().zip(predict_many(model, chunk, protocol, crop)?) {
            if argmax(logits.data()) == clip.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// All metric lines of a run, newline-terminated.
pub fn log_text(logs: &[EpochLog]) -> String {
    logs.iter().map(|l| l.line() + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::new(60);
        assert_eq!(cfg.warmup_epochs, 10);
        assert_eq!(lr_at(10, &cfg).unwrap(), 0.01);
        assert!((lr_at(35, &cfg).unwrap() - 0.005).abs() < 1e-15);
        assert!(lr_at_position(60.0, &cfg).abs() < 1e-15);
        assert!((lr_at(0, &cfg).unwrap() - 0.001).abs() < 1e-15);
        assert!(matches!(lr_at(60, &cfg), Err(GsfError::Usage(_))));
        assert_eq!(scaled_warmup(30), 5);
        assert_eq!(scaled_warmup(1), 0);
    }

    #[test]
    fn sgd_examples() {
        let mut p = [1.5f32, -2.0];
        let mut v = [0.0f32; 2];
        sgd_update(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p, [1.5, -2.0]);

        // Loss (p − 3)² at p = 1 has gradient −4.
        let mut p = [1.0f32];
        let mut v = [0.0f32];
        sgd_update(&mut p, &[-4.0], &mut v, 0.125, 0.0, 0.0);
        assert_eq!(p, [1.5]);

        let mut p = [0.0f32];
        let mut v = [0.0f32];
        let (lr, g) = (0.5, 2.0f32);
        sgd_update(&mut p, &[g], &mut v, lr, 0.9, 0.0);
        sgd_update(&mut p, &[g], &mut v, lr, 0.9, 0.0);
        let expect = -(lr as f32) * (g + (0.9 * g + g));
        assert!((p[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 1.0]), 1);
    }
}
