//! Brute-force references.
//!
//! Everything here is written as literal nested loops over flat `f64`
//! buffers and uses none of the kernels in [`crate::ops`]. Tensors are only
//! read through `shape()` and `data()`.

use crate::error::{GsfError, Result};
use crate::gsf::GsfModule;
use crate::layers::{Parameterized, BN_EPS};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Magnitude below which comparisons switch from relative to absolute error.
pub const ABS_FLOOR: f64 = 1e-6;

/// Outcome of an element-wise comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub max_abs_err: f64,
    /// Largest relative error, with absolute error used where both values
    /// are smaller than [`ABS_FLOOR`].
    pub max_rel_err: f64,
    /// First index whose error exceeds the tolerance.
    pub failing_index: Option<usize>,
    pub tolerance: f64,
    pub compared: usize,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failing_index.is_none()
    }

    /// Combines two reports as if their elements had been compared in one go.
    pub fn merge(self, other: OracleReport) -> OracleReport {
        OracleReport {
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            failing_index: self.failing_index.or(other.failing_index.map(|i| i + self.compared)),
            tolerance: self.tolerance.max(other.tolerance),
            compared: self.compared + other.compared,
        }
    }
}

/// Error of `actual` against `expected`, relative unless both are tiny.
pub fn scaled_error(expected: f64, actual: f64) -> f64 {
    let scale = expected.abs().max(actual.abs());
    let abs = (expected - actual).abs();
    if scale < ABS_FLOOR {
        abs
    } else {
        abs / scale
    }
}

pub fn compare_slices(expected: &[f64], actual: &[f64], tolerance: f64) -> OracleReport {
    let mut report = OracleReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        failing_index: None,
        tolerance,
        compared: expected.len(),
    };
    if expected.len() != actual.len() {
        report.failing_index = Some(expected.len().min(actual.len()));
        report.max_abs_err = f64::INFINITY;
        report.max_rel_err = f64::INFINITY;
        return report;
    }
    for (i, (&e, &a)) in expected.iter().zip(actual).enumerate() {
        let abs = (e - a).abs();
        let err = scaled_error(e, a);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        report.max_abs_err = report.max_abs_err.max(if abs.is_nan() { f64::INFINITY } else { abs });
        report.max_rel_err = report.max_rel_err.max(err);
        if err > tolerance && report.failing_index.is_none() {
            report.failing_index = Some(i);
        }
    }
    report
}

/// Compares a tensor against an oracle output; shapes must agree.
pub fn compare<E: Element>(expected: &Tensor<f64>, actual: &Tensor<E>, tolerance: f64) -> OracleReport {
    if expected.shape() != actual.shape() {
        return compare_slices(expected.data(), &[], tolerance);
    }
    compare_slices(expected.data(), &actual.to_f64_vec(), tolerance)
}

fn flat<E: Element>(t: &Tensor<E>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Direct 2D cross-correlation with zero padding.
pub fn conv2d_oracle<E: Element>(input: &Tensor<E>, kernel: &Tensor<E>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (ho, wo) = (out_len(h, kh, stride, pad), out_len(w, kw, stride, pad));
    let x = flat(input);
    let k = flat(kernel);
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let y = (i * stride + di) as isize - pad as isize;
                                let z = (j * stride + dj) as isize - pad as isize;
                                if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                                    continue;
                                }
                                let xi = ((n * cin + c) * h + y as usize) * w + z as usize;
                                let ki = ((o * cin + c) * kh + di) * kw + dj;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((n * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, cout, ho, wo], out).expect("oracle shape")
}

/// Grouped 3D cross-correlation with one output plane per group.
pub fn conv3d_grouped_oracle<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    pad: (usize, usize, usize),
) -> Tensor<f64> {
    let s = input.shape();
    let (b, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let ks = kernel.shape();
    let (g, cpg, kt, kh, kw) = (ks[0], ks[1], ks[2], ks[3], ks[4]);
    let (to, ho, wo) = (
        out_len(t, kt, 1, pad.0),
        out_len(h, kh, 1, pad.1),
        out_len(w, kw, 1, pad.2),
    );
    let x = flat(input);
    let k = flat(kernel);
    let mut out = vec![0.0; b * g * to * ho * wo];
    for n in 0..b {
        for gi in 0..g {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cpg {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let tt = (ot + dt) as isize - pad.0 as isize;
                                        let hh = (oh + dh) as isize - pad.1 as isize;
                                        let ww = (ow + dw) as isize - pad.2 as isize;
                                        if tt < 0
                                            || hh < 0
                                            || ww < 0
                                            || tt >= t as isize
                                            || hh >= h as isize
                                            || ww >= w as isize
                                        {
                                            continue;
                                        }
                                        let ch = gi * cpg + ci;
                                        let xi = (((n * c + ch) * t + tt as usize) * h + hh as usize) * w + ww as usize;
                                        let ki = (((gi * cpg + ci) * kt + dt) * kh + dh) * kw + dw;
                                        acc += x[xi] * k[ki];
                                    }
                                }
                            }
                        }
                        out[(((n * g + gi) * to + ot) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, g, to, ho, wo], out).expect("oracle shape")
}

/// Mean over the two trailing axes of a `B×C×T×H×W` tensor.
pub fn avg_pool_oracle<E: Element>(input: &Tensor<E>) -> Tensor<f64> {
    let s = input.shape();
    let (b, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let x = flat(input);
    let mut out = vec![0.0; b * c * t];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..h * w {
            acc += x[i * h * w + j];
        }
        *o = acc / (h * w) as f64;
    }
    Tensor::from_vec(&[b, c, t], out).expect("oracle shape")
}

/// GSF weights as plain buffers, in the layout the oracle reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleGsfWeights {
    pub channels: usize,
    /// Processed channels `C_g`.
    pub processed: usize,
    /// Constant gate value, used when `gate_kernels` is `None`.
    pub fixed_gate: f64,
    /// Per group, `(C_g/2)·27` values indexed `[c][dt][dh][dw]`.
    pub gate_kernels: Option<[Vec<f64>; 2]>,
    /// Per group, 18 values indexed `[input][row][col]`.
    pub fusion_kernels: Option<[Vec<f64>; 2]>,
    /// Per-channel `[scale, offset, running_mean, running_var]` of the
    /// normalization applied before the gate convolution.
    pub norm: Option<[Vec<f64>; 4]>,
}

impl OracleGsfWeights {
    pub fn from_module<E: Element>(m: &GsfModule<E>) -> Self {
        let cfg = m.config();
        OracleGsfWeights {
            channels: cfg.channels_in,
            processed: cfg.processed_channels(),
            fixed_gate: cfg.gate_mode.fixed_value().unwrap_or(0.0),
            gate_kernels: m
                .gate_kernel(0)
                .map(|_| [flat(m.gate_kernel(0).unwrap()), flat(m.gate_kernel(1).unwrap())]),
            fusion_kernels: m
                .fusion_kernel(0)
                .map(|_| [flat(m.fusion_kernel(0).unwrap()), flat(m.fusion_kernel(1).unwrap())]),
            norm: m.norm().map(|n| {
                [
                    flat(&n.scale),
                    flat(&n.offset),
                    flat(&n.running_mean),
                    flat(&n.running_var),
                ]
            }),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Scalar-loop transcription of the GSF pipeline on a `B×C×T×H×W` input.
pub fn gsf_scalar_oracle<E: Element>(weights: &OracleGsfWeights, x: &Tensor<E>) -> Tensor<f64> {
    let s = x.shape();
    let (b, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let half = weights.processed / 2;
    let xs = flat(x);
    let idx = |n: usize, ch: usize, tt: usize, y: usize, z: usize| (((n * c + ch) * t + tt) * h + y) * w + z;
    let mut out = xs.clone();

    for n in 0..b {
        for group in 0..2 {
            let base = group * half;

            // Gate plane.
            let mut gate = vec![weights.fixed_gate; t * h * w];
            if let Some(kernels) = &weights.gate_kernels {
                let k = &kernels[group];
                for tt in 0..t {
                    for y in 0..h {
                        for z in 0..w {
                            let mut acc = 0.0;
                            for ci in 0..half {
                                for dt in 0..3 {
                                    for dy in 0..3 {
                                        for dz in 0..3 {
                                            let (ti, yi, zi) = (tt + dt, y + dy, z + dz);
                                            if ti < 1 || yi < 1 || zi < 1 || ti > t || yi > h || zi > w {
                                                continue;
                                            }
                                            let ch = base + ci;
                                            let mut v = xs[idx(n, ch, ti - 1, yi - 1, zi - 1)];
                                            if let Some([sc, off, mean, var]) = &weights.norm {
                                                let z = (v - mean[ch]) / (var[ch] + BN_EPS).sqrt();
                                                v = (sc[ch] * z + off[ch]).max(0.0);
                                            }
                                            acc += k[((ci * 3 + dt) * 3 + dy) * 3 + dz] * v;
                                        }
                                    }
                                }
                            }
                            gate[(tt * h + y) * w + z] = acc.tanh();
                        }
                    }
                }
            }

            // Gated part, residual, and time-shifted gated part.
            let plane = t * h * w;
            let mut gated = vec![0.0; half * plane];
            let mut residual = vec![0.0; half * plane];
            for ci in 0..half {
                for tt in 0..t {
                    for p in 0..h * w {
                        let xv = xs[idx(n, base + ci, tt, 0, 0) + p];
                        let yv = gate[tt * h * w + p] * xv;
                        gated[ci * plane + tt * h * w + p] = yv;
                        residual[ci * plane + tt * h * w + p] = xv - yv;
                    }
                }
            }
            let mut shifted = vec![0.0; half * plane];
            for ci in 0..half {
                for tt in 0..t {
                    let src = if group == 0 {
                        (tt + 1 < t).then_some(tt + 1)
                    } else {
                        tt.checked_sub(1)
                    };
                    if let Some(src) = src {
                        for p in 0..h * w {
                            shifted[ci * plane + tt * h * w + p] = gated[ci * plane + src * h * w + p];
                        }
                    }
                }
            }

            // Fusion weights over the pooled (channel, time) images.
            let mut fuse = vec![f64::NAN; half * t];
            if let Some(kernels) = &weights.fusion_kernels {
                let k = &kernels[group];
                let pool = |buf: &[f64], ci: usize, tt: usize| {
                    let mut acc = 0.0;
                    for p in 0..h * w {
                        acc += buf[ci * plane + tt * h * w + p];
                    }
                    acc / (h * w) as f64
                };
                for ci in 0..half {
                    for tt in 0..t {
                        let mut acc = 0.0;
                        for (input, buf) in [&shifted, &residual].into_iter().enumerate() {
                            for di in 0..3 {
                                for dj in 0..3 {
                                    let (cc, tq) = (ci + di, tt + dj);
                                    if cc < 1 || tq < 1 || cc > half || tq > t {
                                        continue;
                                    }
                                    acc += k[(input * 3 + di) * 3 + dj] * pool(buf, cc - 1, tq - 1);
                                }
                            }
                        }
                        fuse[ci * t + tt] = sigmoid(acc);
                    }
                }
            }

            for ci in 0..half {
                for tt in 0..t {
                    for p in 0..h * w {
                        let j = ci * plane + tt * h * w + p;
                        let z = if weights.fusion_kernels.is_some() {
                            let f = fuse[ci * t + tt];
                            f * shifted[j] + (1.0 - f) * residual[j]
                        } else {
                            shifted[j] + residual[j]
                        };
                        out[idx(n, base + ci, tt, 0, 0) + p] = z;
                    }
                }
            }
        }
    }
    Tensor::from_vec(s, out).expect("oracle shape")
}

/// Temporal shift of the first `processed` channels: the lower half reads
/// frame `t+1`, the upper half frame `t−1`, zero outside the clip.
pub fn shift_oracle<E: Element>(x: &Tensor<E>, processed: usize) -> Tensor<f64> {
    let s = x.shape();
    let (b, c, t, hw) = (s[0], s[1], s[2], s[3] * s[4]);
    let xs = flat(x);
    let mut out = xs.clone();
    let half = processed / 2;
    for n in 0..b {
        for ch in 0..processed {
            for tt in 0..t {
                let src = if ch < half {
                    (tt + 1 < t).then_some(tt + 1)
                } else {
                    tt.checked_sub(1)
                };
                for p in 0..hw {
                    let dst = ((n * c + ch) * t + tt) * hw + p;
                    out[dst] = src.map_or(0.0, |st| xs[((n * c + ch) * t + st) * hw + p]);
                }
            }
        }
    }
    Tensor::from_vec(s, out).expect("oracle shape")
}

/// `2X − shift(X)` on the processed channels, identity elsewhere.
pub fn differencing_oracle<E: Element>(x: &Tensor<E>, processed: usize) -> Tensor<f64> {
    let shifted = shift_oracle(x, processed);
    let s = x.shape();
    let per_item = s[1] * s[2] * s[3] * s[4];
    let processed_len = processed * s[2] * s[3] * s[4];
    let xs = flat(x);
    let out = xs
        .iter()
        .zip(shifted.data())
        .enumerate()
        .map(|(i, (&xv, &sv))| {
            if i % per_item < processed_len {
                2.0 * xv - sv
            } else {
                xv
            }
        })
        .collect();
    Tensor::from_vec(s, out).expect("oracle shape")
}

/// Central-difference check of `analytic` against `f` at `theta`.
///
/// Uses the four-point central stencil
/// `(−f(θ+2ε) + 8f(θ+ε) − 8f(θ−ε) + f(θ−2ε)) / 12ε`, whose truncation error
/// is O(ε⁴).
pub fn grad_check<F>(mut f: F, theta: &[f64], analytic: &[f64], eps: f64, tolerance: f64) -> Result<OracleReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != theta.len() {
        return Err(GsfError::Oracle(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut point = theta.to_vec();
    let mut numeric = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut at = |offset: f64| -> Result<f64> {
            point[i] = theta[i] + offset;
            let v = f(&point)?;
            if !v.is_finite() {
                return Err(GsfError::Oracle(format!("non-finite evaluation at parameter {i}")));
            }
            Ok(v)
        };
        let (p2, p1, m1, m2) = (at(2.0 * eps)?, at(eps)?, at(-eps)?, at(-2.0 * eps)?);
        point[i] = theta[i];
        numeric.push((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * eps));
    }
    Ok(compare_slices(&numeric, analytic, tolerance))
}

/// Checks every parameter gradient of `module` for the loss
/// `Σ probe ⊙ gsf(x)` against central differences.
pub fn gsf_grad_check(
    module: &GsfModule<f64>,
    x: &Tensor<f64>,
    probe: &Tensor<f64>,
    eps: f64,
    tolerance: f64,
) -> Result<OracleReport> {
    let loss = |m: &GsfModule<f64>, want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = tape.constant(probe.clone());
        let y = m.forward(&mut tape, xv, "gsf")?;
        let weighted = tape.hadamard(y, pv)?;
        let l = tape.sum_all(weighted)?;
        let value = tape.value(l).data()[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(l)?;
        let mut g = Vec::new();
        let mut missing = None;
        m.visit_params("gsf", &mut |name, t| match grads.named(&name) {
            Some(gt) => g.extend_from_slice(gt.data()),
            None => {
                missing.get_or_insert(name);
                g.extend(std::iter::repeat_n(0.0, t.len()));
            }
        });
        if let Some(name) = missing {
            return Err(GsfError::Oracle(format!("no gradient recorded for {name}")));
        }
        Ok((value, g))
    };

    let mut theta = Vec::new();
    module.visit_params("", &mut |_, t| theta.extend_from_slice(t.data()));
    let (_, analytic) = loss(module, true)?;
    let mut probe_module = module.clone();
    grad_check(
        |p| {
            let mut off = 0;
            probe_module.visit_params_mut("", &mut |_, t| {
                let n = t.len();
                t.data_mut().copy_from_slice(&p[off..off + n]);
                off += n;
            });
            Ok(loss(&probe_module, false)?.0)
        },
        &theta,
        &analytic,
        eps,
        tolerance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsf::GsfConfig;
    use crate::rng::seeded;

    #[test]
    fn relative_error_falls_back_to_absolute() {
        assert_eq!(scaled_error(0.0, 5e-7), 5e-7);
        assert!((scaled_error(2.0, 2.2) - 0.2 / 2.2).abs() < 1e-15);
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let theta = [0.3, -1.2, 2.5];
        let analytic: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        let r = grad_check(|p| Ok(p.iter().map(|v| v * v).sum()), &theta, &analytic, 1e-3, 1e-9).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn saturated_tanh_uses_absolute_error() {
        let theta = [40.0];
        let analytic = [1.0 - 40.0f64.tanh().powi(2)];
        let r = grad_check(|p| Ok(p[0].tanh()), &theta, &analytic, 1e-3, 1e-6).unwrap();
        assert!(r.passed());
        assert!(r.max_abs_err <= 1e-6);
    }

    #[test]
    fn non_finite_evaluation_is_an_oracle_error() {
        let r = grad_check(|_| Ok(f64::NAN), &[1.0], &[0.0], 1e-3, 1e-4);
        assert!(matches!(r, Err(GsfError::Oracle(_))));
    }

    #[test]
    fn conv_oracles_handle_delta_and_zero() {
        let x = Tensor::<f64>::randn(&[1, 1, 3, 4, 4], 1.0, &mut seeded(1));
        let mut k = Tensor::<f64>::zeros(&[1, 1, 3, 3, 3]);
        assert!(conv3d_grouped_oracle(&x, &k, (1, 1, 1))
            .data()
            .iter()
            .all(|&v| v == 0.0));
        k.set(&[0, 0, 1, 1, 1], 1.0);
        assert_eq!(conv3d_grouped_oracle(&x, &k, (1, 1, 1)), x);

        let x2 = x.reshape(&[1, 3, 4, 4]).unwrap();
        let mut k2 = Tensor::<f64>::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k2.set(&[c, c, 1, 1], 1.0);
        }
        assert_eq!(conv2d_oracle(&x2, &k2, 1, 1), x2);
    }

    #[test]
    fn gate_zero_sum_oracle_is_identity() {
        let cfg = GsfConfig::new(6).with_modes("0".parse().unwrap(), "sum".parse().unwrap());
        let w = OracleGsfWeights::from_module(&GsfModule::<f64>::new(cfg).unwrap());
        let x = Tensor::<f64>::randn(&[2, 6, 3, 2, 2], 1.0, &mut seeded(2));
        assert_eq!(gsf_scalar_oracle(&w, &x), x);
    }

    #[test]
    fn learned_module_gradients_pass() {
        let cfg = GsfConfig::new(4).with_fraction(1.0);
        let m = GsfModule::<f64>::random(cfg, 0.3, &mut seeded(3)).unwrap();
        let mut rng = seeded(4);
        let x = loop {
            let x = Tensor::<f64>::randn(&[1, 4, 3, 3, 3], 1.0, &mut rng);
            if crate::selftest::clear_of_kinks(&m, &x, crate::selftest::KINK_MARGIN) {
                break x;
            }
        };
        let probe = Tensor::<f64>::randn(&[1, 4, 3, 3, 3], 1.0, &mut seeded(5));
        let r = gsf_grad_check(&m, &x, &probe, 1e-3, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
