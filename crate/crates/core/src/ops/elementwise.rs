//! Pointwise maps and same-rank broadcasting binary ops.
//!
//! Broadcasting follows the usual rule restricted to equal ranks: each axis
//! either matches or is 1 in one of the operands.

use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tensor, MAX_RANK};

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return dim_err(format!("cannot broadcast {a:?} with {b:?}: rank differs"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => dim_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

/// Row-major strides of `shape`, zeroed on axes where `shape` is broadcast
/// up to `target`.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> [usize; MAX_RANK] {
    let mut strides = [0usize; MAX_RANK];
    let mut s = 1;
    for axis in (0..shape.len()).rev() {
        strides[axis] = if shape[axis] == target[axis] { s } else { 0 };
        s *= shape[axis];
    }
    strides
}

/// Visits every element of `target`, passing the flat offsets into each of
/// the (possibly broadcast) operand shapes.
fn for_each_broadcast<const N: usize>(target: &[usize], operands: [&[usize]; N], mut f: impl FnMut(usize, [usize; N])) {
    let rank = target.len();
    let total: usize = target.iter().product();
    if total == 0 {
        return;
    }
    let strides: [[usize; MAX_RANK]; N] = operands.map(|s| broadcast_strides(s, target));
    let mut index = [0usize; MAX_RANK];
    let mut offs = [0usize; N];
    for flat in 0..total {
        f(flat, offs);
        // odometer increment
        for axis in (0..rank).rev() {
            index[axis] += 1;
            for (o, st) in offs.iter_mut().zip(&strides) {
                *o += st[axis];
            }
            if index[axis] < target[axis] {
                break;
            }
            for (o, st) in offs.iter_mut().zip(&strides) {
                *o -= st[axis] * index[axis];
            }
            index[axis] = 0;
        }
    }
}

/// Sums `grad` (of shape `from`) down to the broadcast source shape `to`.
pub fn sum_to_shape<E: Element>(grad: &Tensor<E>, to: &[usize]) -> Result<Tensor<E>> {
    if grad.shape() == to {
        return Ok(grad.clone());
    }
    broadcast_shape(to, grad.shape())?;
    let n: usize = to.iter().product();
    let mut acc = vec![0.0f64; n];
    let g = grad.data();
    for_each_broadcast(grad.shape(), [to], |flat, [o]| {
        acc[o] += g[flat].as_f64();
    });
    Tensor::from_vec(to, acc.into_iter().map(E::from_f64).collect())
}

fn binary<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape(), data);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![E::zero(); shape.iter().product()];
    for_each_broadcast(&shape, [a.shape(), b.shape()], |flat, [i, j]| {
        out[flat] = f(ad[i], bd[j]);
    });
    Tensor::from_vec(&shape, out)
}

pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(a, b, |x, y| x + y)
}

pub fn sub<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(a, b, |x, y| x - y)
}

pub fn hadamard<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(a, b, |x, y| x * y)
}

/// `weight ⊙ a + (1 − weight) ⊙ b`, with `weight` broadcast to the shape of
/// `a` and `b`.
pub fn affine_combine<E: Element>(weight: &Tensor<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "affine_combine operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let shape = broadcast_shape(weight.shape(), a.shape())?;
    if shape != a.shape() {
        return dim_err(format!(
            "weight {:?} does not broadcast onto {:?}",
            weight.shape(),
            a.shape()
        ));
    }
    let (wd, ad, bd) = (weight.data(), a.data(), b.data());
    let mut out = vec![E::zero(); a.len()];
    for_each_broadcast(&shape, [weight.shape()], |flat, [i]| {
        let w = wd[i];
        out[flat] = w * ad[flat] + (E::one() - w) * bd[flat];
    });
    Tensor::from_vec(&shape, out)
}

/// Gradients of [`affine_combine`] for (weight, a, b).
pub fn affine_combine_backward<E: Element>(
    weight: &Tensor<E>,
    a: &Tensor<E>,
    b: &Tensor<E>,
    grad: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let wd = weight.data();
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    let mut ga = vec![E::zero(); a.len()];
    let mut gb = vec![E::zero(); a.len()];
    let mut gw = vec![0.0f64; weight.len()];
    for_each_broadcast(a.shape(), [weight.shape()], |flat, [i]| {
        let w = wd[i];
        let g = gd[flat];
        ga[flat] = w * g;
        gb[flat] = (E::one() - w) * g;
        gw[i] += (ad[flat].as_f64() - bd[flat].as_f64()) * g.as_f64();
    });
    Ok((
        Tensor::from_vec(weight.shape(), gw.into_iter().map(E::from_f64).collect())?,
        Tensor::from_vec(a.shape(), ga)?,
        Tensor::from_vec(a.shape(), gb)?,
    ))
}

pub fn tanh<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v.tanh())
}

pub fn sigmoid<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| {
        if v >= E::zero() {
            E::one() / (E::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (E::one() + e)
        }
    })
}

pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::zero() { v } else { E::zero() })
}

/// Per-channel `x * scale[c] + offset[c]` for `x` of shape `N×C×…`.
pub fn channel_affine<E: Element>(x: &Tensor<E>, scale: &Tensor<E>, offset: &Tensor<E>) -> Result<Tensor<E>> {
    if x.rank() < 2 {
        return dim_err("channel_affine needs an N×C×… input");
    }
    let c = x.dim(1);
    if scale.shape() != [c] || offset.shape() != [c] {
        return dim_err(format!(
            "channel_affine parameters must have shape [{c}], got {:?} and {:?}",
            scale.shape(),
            offset.shape()
        ));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let (s, o) = (scale.data(), offset.data());
    let mut out = x.data().to_vec();
    for (chunk_index, chunk) in out.chunks_mut(inner.max(1)).enumerate() {
        let ch = chunk_index % c;
        for v in chunk.iter_mut() {
            *v = *v * s[ch] + o[ch];
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Gradients of [`channel_affine`] for (x, scale, offset).
pub fn channel_affine_backward<E: Element>(
    x: &Tensor<E>,
    scale: &Tensor<E>,
    grad: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let c = x.dim(1);
    let inner: usize = x.shape()[2..].iter().product::<usize>().max(1);
    let s = scale.data();
    let mut gs = vec![0.0f64; c];
    let mut go = vec![0.0f64; c];
    let mut gx = vec![E::zero(); x.len()];
    for (chunk_index, ((gx_c, x_c), g_c)) in gx
        .chunks_mut(inner)
        .zip(x.data().chunks(inner))
        .zip(grad.data().chunks(inner))
        .enumerate()
    {
        let ch = chunk_index % c;
        for ((d, &xv), &gv) in gx_c.iter_mut().zip(x_c).zip(g_c) {
            *d = gv * s[ch];
            gs[ch] += gv.as_f64() * xv.as_f64();
            go[ch] += gv.as_f64();
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(&[c], gs.into_iter().map(E::from_f64).collect())?,
        Tensor::from_vec(&[c], go.into_iter().map(E::from_f64).collect())?,
    ))
}

/// Per-channel batch statistics of an `N×C×…` tensor, accumulated in 64
/// bits. Returns (mean, biased variance).
pub fn channel_moments<E: Element>(x: &Tensor<E>) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rank() < 2 || x.is_empty() {
        return dim_err("channel statistics need a non-empty N×C×… input");
    }
    let c = x.dim(1);
    let inner: usize = x.shape()[2..].iter().product::<usize>().max(1);
    let count = (x.len() / c) as f64;
    let mut mean = vec![0.0f64; c];
    for (i, chunk) in x.data().chunks(inner).enumerate() {
        mean[i % c] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0f64; c];
    for (i, chunk) in x.data().chunks(inner).enumerate() {
        let m = mean[i % c];
        var[i % c] += chunk.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

/// `(x − mean_c) · inv_std_c` per channel.
pub fn channel_standardize<E: Element>(x: &Tensor<E>, mean: &[f64], inv_std: &[f64]) -> Result<Tensor<E>> {
    let c = x.dim(1);
    let inner: usize = x.shape()[2..].iter().product::<usize>().max(1);
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(inner).enumerate() {
        let (m, k) = (mean[i % c], inv_std[i % c]);
        for v in chunk.iter_mut() {
            *v = E::from_f64((v.as_f64() - m) * k);
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Input gradient of batch standardization, given its output `xhat`:
/// `inv_std · (g − mean(g) − xhat · mean(g · xhat))` per channel.
pub fn channel_standardize_backward<E: Element>(
    xhat: &Tensor<E>,
    inv_std: &[f64],
    grad: &Tensor<E>,
) -> Result<Tensor<E>> {
    if xhat.shape() != grad.shape() {
        return dim_err("standardize gradient shape mismatch");
    }
    let c = xhat.dim(1);
    let inner: usize = xhat.shape()[2..].iter().product::<usize>().max(1);
    let count = (xhat.len() / c) as f64;
    let mut mg = vec![0.0f64; c];
    let mut mgx = vec![0.0f64; c];
    for (i, (xc, gc)) in xhat.data().chunks(inner).zip(grad.data().chunks(inner)).enumerate() {
        for (&xv, &gv) in xc.iter().zip(gc) {
            mg[i % c] += gv.as_f64();
            mgx[i % c] += gv.as_f64() * xv.as_f64();
        }
    }
    let mut out = vec![E::zero(); xhat.len()];
    for (i, ((oc, xc), gc)) in out
        .chunks_mut(inner)
        .zip(xhat.data().chunks(inner))
        .zip(grad.data().chunks(inner))
        .enumerate()
    {
        let ch = i % c;
        let (a, b, k) = (mg[ch] / count, mgx[ch] / count, inv_std[ch]);
        for ((o, &xv), &gv) in oc.iter_mut().zip(xc).zip(gc) {
            *o = E::from_f64(k * (gv.as_f64() - a - xv.as_f64() * b));
        }
    }
    Tensor::from_vec(xhat.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_fixed_points() {
        let z = Tensor::<f32>::zeros(&[1]);
        assert_eq!(tanh(&z).data()[0], 0.0);
        assert_eq!(sigmoid(&z).data()[0], 0.5);
    }

    #[test]
    fn sigmoid_is_stable_for_large_magnitudes() {
        let t = Tensor::<f32>::from_vec(&[2], vec![-200.0, 200.0]).unwrap();
        let s = sigmoid(&t);
        assert!(s.is_finite());
        assert_eq!(s.data(), &[0.0, 1.0]);
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let x = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.0, -0.25]).unwrap();
        assert_eq!(hadamard(&x, &Tensor::ones(&[2, 3])).unwrap(), x);
    }

    #[test]
    fn affine_combine_scalar_weight() {
        let w = Tensor::<f32>::from_vec(&[1], vec![0.25]).unwrap();
        let a = Tensor::<f32>::from_vec(&[1], vec![4.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[1], vec![8.0]).unwrap();
        assert_eq!(affine_combine(&w, &a, &b).unwrap().data()[0], 7.0);
    }

    #[test]
    fn broadcast_matches_explicit_tiling() {
        // C×T×1×1 against C×T×H×W
        let f = Tensor::<f32>::from_vec(&[2, 3, 1, 1], (0..6).map(|v| v as f32 * 0.5).collect()).unwrap();
        let x = Tensor::<f32>::from_vec(&[2, 3, 2, 2], (0..24).map(|v| v as f32 - 3.0).collect()).unwrap();
        let mut tiled = Tensor::<f32>::zeros(&[2, 3, 2, 2]);
        for c in 0..2 {
            for t in 0..3 {
                for h in 0..2 {
                    for w in 0..2 {
                        tiled.set(&[c, t, h, w], f.at(&[c, t, 0, 0]));
                    }
                }
            }
        }
        assert_eq!(hadamard(&f, &x).unwrap(), hadamard(&tiled, &x).unwrap());
        assert_eq!(hadamard(&x, &f).unwrap(), hadamard(&x, &tiled).unwrap());
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[3, 2]);
        assert!(matches!(add(&a, &b), Err(crate::GsfError::Dimension(_))));
        let c = Tensor::<f32>::zeros(&[2, 3, 1]);
        assert!(matches!(add(&a, &c), Err(crate::GsfError::Dimension(_))));
    }

    #[test]
    fn sum_to_shape_reduces_broadcast_axes() {
        let g = Tensor::<f32>::ones(&[2, 3, 4]);
        let r = sum_to_shape(&g, &[2, 1, 4]).unwrap();
        assert_eq!(r.shape(), &[2, 1, 4]);
        assert!(r.data().iter().all(|&v| v == 3.0));
    }
}
